//! The uncertainty ledger: a nine-source taxonomy every analysis must
//! account for, plus a tamper-evident audit trail.
//!
//! Silence about an uncertainty source is not allowed. Each analysis
//! carries a manifest declaring, for all nine sources, whether the source
//! is quantified (and by which pipeline stage), assessed to an order of
//! magnitude, or deliberately ignored — the latter two always with a
//! rationale. Reports refuse to render without a complete manifest.
//!
//! The audit chain records every operation (inputs, seed, outputs,
//! rationale) in a SHA-256 hash chain so the provenance of a conclusion can
//! be replayed and checked end-to-end.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The nine sources of uncertainty every analysis manifest must address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Imperfect knowledge of model input parameters.
    Parametric,
    /// Uncertain initial/boundary conditions and forcing functions.
    Condition,
    /// The model is only evaluated at finitely many inputs.
    Functional,
    /// Intrinsic randomness in the system being modelled.
    Stochastic,
    /// Numerical error in solving the model's equations.
    Solution,
    /// The model's form differs from reality.
    Structural,
    /// Error in the observations used for calibration.
    Measurement,
    /// Disagreement between alternative models of the same system.
    MultiModel,
    /// Uncertainty about how decisions will actually be implemented.
    Decision,
}

impl SourceKind {
    pub const ALL: [SourceKind; 9] = [
        SourceKind::Parametric,
        SourceKind::Condition,
        SourceKind::Functional,
        SourceKind::Stochastic,
        SourceKind::Solution,
        SourceKind::Structural,
        SourceKind::Measurement,
        SourceKind::MultiModel,
        SourceKind::Decision,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::Parametric => "parametric",
            SourceKind::Condition => "condition",
            SourceKind::Functional => "functional",
            SourceKind::Stochastic => "stochastic",
            SourceKind::Solution => "solution",
            SourceKind::Structural => "structural",
            SourceKind::Measurement => "measurement",
            SourceKind::MultiModel => "multi-model",
            SourceKind::Decision => "decision",
        }
    }

    /// The pipeline stage that quantifies this source when it is in use,
    /// if any. Sources without a stage always need an explicit assessment.
    fn quantifying_module(&self) -> Option<&'static str> {
        match self {
            SourceKind::Parametric => Some("calibration"),
            SourceKind::Functional => Some("emulator"),
            SourceKind::Structural => Some("discrepancy"),
            SourceKind::Measurement => Some("observations"),
            SourceKind::MultiModel => Some("chain"),
            SourceKind::Decision => Some("decision"),
            SourceKind::Condition | SourceKind::Stochastic | SourceKind::Solution => None,
        }
    }
}

/// How a source of uncertainty is handled in an analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "treatment", rename_all = "kebab-case")]
pub enum Treatment {
    /// Fully quantified by a pipeline stage.
    Quantified { module: String },
    /// Not quantified, but bounded by an order-of-magnitude assessment.
    OrderOfMagnitude { value: f64, rationale: String },
    /// Deliberately left out — with the reason on record.
    Ignored { rationale: String },
}

impl Treatment {
    fn validate(&self, kind: SourceKind) -> Result<()> {
        let rationale = match self {
            Treatment::Quantified { module } => {
                if module.trim().is_empty() {
                    return Err(Error::ManifestIncomplete(format!(
                        "source '{}' is marked quantified but names no module",
                        kind.as_str()
                    )));
                }
                return Ok(());
            }
            Treatment::OrderOfMagnitude { rationale, .. } => rationale,
            Treatment::Ignored { rationale } => rationale,
        };
        if rationale.trim().is_empty() {
            return Err(Error::ManifestIncomplete(format!(
                "source '{}' needs a rationale — silence is not allowed",
                kind.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySource {
    pub kind: SourceKind,
    #[serde(flatten)]
    pub treatment: Treatment,
}

/// A complete accounting of all nine uncertainty sources. Construction
/// guarantees each kind appears exactly once with a valid treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<UncertaintySource>", into = "Vec<UncertaintySource>")]
pub struct Manifest {
    sources: Vec<UncertaintySource>,
}

impl Manifest {
    /// All nine sources in canonical order.
    pub fn sources(&self) -> &[UncertaintySource] {
        &self.sources
    }

    pub fn treatment(&self, kind: SourceKind) -> &Treatment {
        &self
            .sources
            .iter()
            .find(|s| s.kind == kind)
            .expect("manifest construction guarantees all nine kinds")
            .treatment
    }

    pub fn n_quantified(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s.treatment, Treatment::Quantified { .. }))
            .count()
    }
}

impl TryFrom<Vec<UncertaintySource>> for Manifest {
    type Error = Error;

    fn try_from(mut sources: Vec<UncertaintySource>) -> Result<Self> {
        let kinds: BTreeSet<SourceKind> = sources.iter().map(|s| s.kind).collect();
        if kinds.len() != sources.len() {
            return Err(Error::ManifestIncomplete(
                "a source kind appears more than once".into(),
            ));
        }
        for kind in SourceKind::ALL {
            if !kinds.contains(&kind) {
                return Err(Error::ManifestIncomplete(format!(
                    "source '{}' is not addressed",
                    kind.as_str()
                )));
            }
        }
        for s in &sources {
            s.treatment.validate(s.kind)?;
        }
        sources.sort_by_key(|s| s.kind);
        Ok(Manifest { sources })
    }
}

impl From<Manifest> for Vec<UncertaintySource> {
    fn from(m: Manifest) -> Self {
        m.sources
    }
}

/// What an analysis run declares about itself: which pipeline stages it
/// exercised, and explicit treatments for sources those stages don't cover
/// (or overrides for ones they do).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Pipeline stages in use: "calibration", "emulator", "discrepancy",
    /// "observations", "chain", "decision".
    #[serde(default)]
    pub modules_used: BTreeSet<String>,
    /// Explicit per-source treatments. Required for any source no listed
    /// stage quantifies.
    #[serde(default)]
    pub assessments: BTreeMap<SourceKind, Treatment>,
}

/// Build the nine-entry manifest for an analysis: sources covered by a
/// listed stage become quantified automatically; everything else must carry
/// an explicit assessment with a rationale, or the build fails.
pub fn build_manifest(config: &AnalysisConfig) -> Result<Manifest> {
    let mut sources = Vec::with_capacity(9);
    for kind in SourceKind::ALL {
        let treatment = if let Some(t) = config.assessments.get(&kind) {
            t.validate(kind)?;
            t.clone()
        } else if let Some(module) = kind
            .quantifying_module()
            .filter(|m| config.modules_used.contains(*m))
        {
            Treatment::Quantified {
                module: module.to_string(),
            }
        } else {
            return Err(Error::ManifestIncomplete(format!(
                "source '{}' is not quantified by any stage in use and has no \
                 assessment — record an order-of-magnitude value or an ignore \
                 rationale",
                kind.as_str()
            )));
        };
        sources.push(UncertaintySource { kind, treatment });
    }
    Ok(Manifest { sources })
}

/// Hex-encoded SHA-256 of raw bytes, used for artifact hashes and the audit
/// chain.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

/// One operation in the audit trail. Timestamps are caller-supplied strings
/// so the core stays clock-free and replays stay byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub operation: String,
    /// Artifact path → SHA-256 of its bytes.
    #[serde(default)]
    pub input_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_hashes: BTreeMap<String, String>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub record: AuditRecord,
    pub prev_hash: String,
    pub hash: String,
}

const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

fn entry_hash(prev_hash: &str, record: &AuditRecord) -> String {
    let canonical =
        serde_json::to_string(record).expect("audit records contain only serializable fields");
    let mut bytes = Vec::with_capacity(prev_hash.len() + canonical.len());
    bytes.extend_from_slice(prev_hash.as_bytes());
    bytes.extend_from_slice(canonical.as_bytes());
    sha256_hex(&bytes)
}

/// Append-only hash chain of [`AuditRecord`]s. Every entry commits to its
/// predecessor, so any mutation of stored history breaks verification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AuditEntry>", into = "Vec<AuditEntry>")]
pub struct AuditChain {
    entries: Vec<AuditEntry>,
}

impl AuditChain {
    pub fn new() -> Self {
        AuditChain::default()
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Verify then append, returning the new entry's hash.
    pub fn append(&mut self, record: AuditRecord) -> Result<String> {
        self.verify()?;
        let prev_hash = self
            .entries
            .last()
            .map(|e| e.hash.clone())
            .unwrap_or_else(|| GENESIS_HASH.to_string());
        let hash = entry_hash(&prev_hash, &record);
        self.entries.push(AuditEntry {
            record,
            prev_hash,
            hash: hash.clone(),
        });
        Ok(hash)
    }

    /// Recompute every hash and check the links.
    pub fn verify(&self) -> Result<()> {
        let mut expected_prev = GENESIS_HASH.to_string();
        for (index, entry) in self.entries.iter().enumerate() {
            if entry.prev_hash != expected_prev {
                return Err(Error::AuditChainBroken {
                    index,
                    reason: "predecessor link does not match".into(),
                });
            }
            let recomputed = entry_hash(&entry.prev_hash, &entry.record);
            if recomputed != entry.hash {
                return Err(Error::AuditChainBroken {
                    index,
                    reason: "stored hash does not match record contents".into(),
                });
            }
            expected_prev = entry.hash.clone();
        }
        Ok(())
    }
}

impl TryFrom<Vec<AuditEntry>> for AuditChain {
    type Error = Error;

    fn try_from(entries: Vec<AuditEntry>) -> Result<Self> {
        let chain = AuditChain { entries };
        chain.verify()?;
        Ok(chain)
    }
}

impl From<AuditChain> for Vec<AuditEntry> {
    fn from(c: AuditChain) -> Self {
        c.entries
    }
}

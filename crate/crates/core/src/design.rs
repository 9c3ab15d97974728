//! Experimental designs: space-filling point sets and simulator runs over
//! them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::substream;
use crate::simulator::{self, ExternalSession, SimulatorHandle};
use crate::space::InputSpace;

/// A set of design points in native units, with simulator responses once the
/// design has been run.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    pub space: InputSpace,
    /// n_runs x n_dims.
    pub points: Vec<Vec<f64>>,
    /// n_runs x n_outputs; empty until the design is run.
    pub responses: Vec<Vec<f64>>,
    pub output_names: Vec<String>,
}

impl DesignSet {
    pub fn new(space: InputSpace, points: Vec<Vec<f64>>) -> Result<Self> {
        let design = DesignSet {
            space,
            points,
            responses: Vec::new(),
            output_names: Vec::new(),
        };
        design.validate()?;
        Ok(design)
    }

    pub fn with_responses(
        space: InputSpace,
        points: Vec<Vec<f64>>,
        responses: Vec<Vec<f64>>,
        output_names: &[&str],
    ) -> Result<Self> {
        let design = DesignSet {
            space,
            points,
            responses,
            output_names: output_names.iter().map(|s| s.to_string()).collect(),
        };
        design.validate()?;
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        for (i, p) in self.points.iter().enumerate() {
            self.space
                .check_arity(p)
                .map_err(|e| Error::DesignRow { row: i, source: Box::new(e) })?;
        }
        for (i, p) in self.points.iter().enumerate() {
            if self.points[..i].iter().any(|q| q == p) {
                return Err(Error::InvalidDesign(format!("duplicate design point at row {i}")));
            }
        }
        if !self.responses.is_empty() {
            if self.responses.len() != self.points.len() {
                return Err(Error::InvalidDesign(format!(
                    "{} response rows for {} points",
                    self.responses.len(),
                    self.points.len()
                )));
            }
            let width = self.output_names.len();
            if width == 0 {
                return Err(Error::InvalidDesign("responses present but no output names".into()));
            }
            for (i, r) in self.responses.iter().enumerate() {
                if r.len() != width {
                    return Err(Error::InvalidDesign(format!(
                        "response row {i} has {} values, expected {width}",
                        r.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.points.len()
    }

    pub fn has_responses(&self) -> bool {
        !self.responses.is_empty()
    }

    pub fn output_index(&self, name: &str) -> Result<usize> {
        self.output_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownOutput {
                name: name.to_string(),
                available: self.output_names.clone(),
            })
    }

    /// Restrict a multi-output design to a single named output column.
    pub fn select_output(&self, name: &str) -> Result<DesignSet> {
        let j = self.output_index(name)?;
        Ok(DesignSet {
            space: self.space.clone(),
            points: self.points.clone(),
            responses: self.responses.iter().map(|r| vec![r[j]]).collect(),
            output_names: vec![name.to_string()],
        })
    }

    /// Single response column as a flat vector.
    pub fn single_responses(&self) -> Result<Vec<f64>> {
        if self.output_names.len() != 1 {
            return Err(Error::InvalidDesign(format!(
                "expected a single output column, found {:?}; select one output first",
                self.output_names
            )));
        }
        Ok(self.responses.iter().map(|r| r[0]).collect())
    }
}

/// Number of maximin candidates drawn per design request.
const MAXIMIN_CANDIDATES: usize = 20;

/// Generate a maximin-jittered Latin hypercube design: for each dimension the
/// `n` coordinates occupy the `n` equal-width strata of its range, one point
/// per stratum, uniformly jittered within the stratum. Of several candidate
/// designs the one with the largest minimum pairwise distance (in
/// standardized units) is kept. Responses are left empty.
pub fn latin_hypercube(space: &InputSpace, n: usize, seed: u64) -> Result<DesignSet> {
    if n == 0 {
        return Err(Error::InvalidDesign("latin hypercube needs n >= 1".into()));
    }
    space.validate()?;
    let mut rng = substream(seed, "design.latin_hypercube", 0);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..MAXIMIN_CANDIDATES {
        let candidate = lhs_candidate(space, n, &mut rng);
        let score = min_pairwise_distance(space, &candidate)?;
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, candidate));
        }
    }
    let (_, points) = best.expect("at least one candidate");
    DesignSet::new(space.clone(), points)
}

fn lhs_candidate(space: &InputSpace, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = space.n_dims();
    let mut coords = vec![vec![0.0; n]; d];
    for (j, dim) in space.dims().iter().enumerate() {
        let width = (dim.upper - dim.lower) / n as f64;
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.iter().enumerate() {
            let jitter: f64 = rng.random();
            coords[j][i] = dim.lower + (*s as f64 + jitter) * width;
        }
    }
    (0..n).map(|i| (0..d).map(|j| coords[j][i]).collect()).collect()
}

fn min_pairwise_distance(space: &InputSpace, points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let std: Vec<Vec<f64>> = points
        .iter()
        .map(|p| space.standardize(p))
        .collect::<Result<_>>()?;
    let mut min = f64::INFINITY;
    for i in 0..std.len() {
        for j in i + 1..std.len() {
            let d2: f64 = std[i]
                .iter()
                .zip(&std[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            min = min.min(d2.sqrt());
        }
    }
    Ok(min)
}

/// Evaluate the simulator at every design point, preserving row order.
/// Any evaluation failure is reported with the offending row index.
pub fn run_design(handle: &SimulatorHandle, design: &DesignSet) -> Result<DesignSet> {
    if design.has_responses() {
        return Err(Error::InvalidDesign("design already has responses".into()));
    }
    let responses = match handle {
        SimulatorHandle::InProcess { .. } => design
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                simulator::evaluate(handle, p)
                    .map_err(|e| Error::DesignRow { row: i, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()?,
        SimulatorHandle::External { .. } => {
            // One child serves all rows over the line protocol.
            let mut session = ExternalSession::spawn(handle)?;
            let mut out = Vec::with_capacity(design.n_runs());
            for (i, p) in design.points.iter().enumerate() {
                let reply = session
                    .request(p)
                    .and_then(|r| check_output_arity(handle, p, r))
                    .map_err(|e| Error::DesignRow { row: i, source: Box::new(e) })?;
                out.push(reply);
            }
            out
        }
    };
    let mut run = design.clone();
    run.responses = responses;
    run.output_names = handle.output_names().to_vec();
    run.validate()?;
    Ok(run)
}

fn check_output_arity(handle: &SimulatorHandle, point: &[f64], out: Vec<f64>) -> Result<Vec<f64>> {
    if out.len() != handle.n_outputs() {
        return Err(Error::MalformedOutput {
            point: point.to_vec(),
            reason: format!("expected {} outputs, got {}", handle.n_outputs(), out.len()),
        });
    }
    Ok(out)
}

/// Write a design as CSV: header of dimension names followed by output
/// names, one run per row, shortest round-trip decimals.
pub fn save_csv(design: &DesignSet, path: &std::path::Path) -> Result<()> {
    let mut header: Vec<String> = design.space.names().iter().map(|s| s.to_string()).collect();
    header.extend(design.output_names.iter().cloned());
    let mut rows = Vec::with_capacity(design.n_runs());
    for (i, p) in design.points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        if design.has_responses() {
            row.extend(design.responses[i].iter().map(|v| format!("{v}")));
        }
        rows.push(row);
    }
    crate::report::write_atomic(path, &render_csv(&header, &rows))
}

fn render_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

/// Read a design CSV against a known space. Columns matching space dimension
/// names become points (in space order); remaining columns become outputs.
pub fn load_csv(space: &InputSpace, path: &std::path::Path) -> Result<DesignSet> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::doc(&display, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::doc(&display, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut dim_cols = Vec::with_capacity(space.n_dims());
    for name in space.names() {
        let col = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::doc(&display, format!("missing dimension column `{name}`")))?;
        dim_cols.push(col);
    }
    let output_cols: Vec<usize> = (0..header.len()).filter(|c| !dim_cols.contains(c)).collect();
    let output_names: Vec<String> = output_cols.iter().map(|&c| header[c].clone()).collect();

    let mut points = Vec::new();
    let mut responses = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::doc(&display, e.to_string()))?;
        let parse = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::doc(&display, format!("row {i}: bad value in column `{}`", header[c])))
        };
        points.push(dim_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?);
        if !output_cols.is_empty() {
            responses.push(output_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?);
        }
    }
    let design = DesignSet {
        space: space.clone(),
        points,
        responses,
        output_names,
    };
    design.validate()?;
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Dimension;

    fn unit_space(d: usize) -> InputSpace {
        InputSpace::new_parameters(
            (0..d)
                .map(|i| Dimension {
                    name: format!("x{i}"),
                    lower: 0.0,
                    upper: 1.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_point_design_is_in_bounds() {
        let design = latin_hypercube(&unit_space(1), 1, 3).unwrap();
        assert_eq!(design.n_runs(), 1);
        let v = design.points[0][0];
        assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn four_strata_each_hold_one_point() {
        let space = InputSpace::new_parameters(vec![Dimension {
            name: "x".into(),
            lower: 0.0,
            upper: 4.0,
        }])
        .unwrap();
        let design = latin_hypercube(&space, 4, 11).unwrap();
        let mut strata: Vec<usize> = design.points.iter().map(|p| p[0].floor() as usize).collect();
        strata.sort_unstable();
        assert_eq!(strata, vec![0, 1, 2, 3]);
    }

    #[test]
    fn marginal_stratification_holds_in_3d() {
        let n = 50;
        let design = latin_hypercube(&unit_space(3), n, 99).unwrap();
        for j in 0..3 {
            let mut strata: Vec<usize> = design
                .points
                .iter()
                .map(|p| ((p[j] * n as f64).floor() as usize).min(n - 1))
                .collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..n).collect::<Vec<_>>(), "dimension {j}");
        }
    }

    #[test]
    fn seed_determinism() {
        let a = latin_hypercube(&unit_space(2), 17, 42).unwrap();
        let b = latin_hypercube(&unit_space(2), 17, 42).unwrap();
        assert_eq!(a.points, b.points);
        let c = latin_hypercube(&unit_space(2), 17, 43).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn zero_runs_rejected() {
        assert!(latin_hypercube(&unit_space(1), 0, 1).is_err());
    }

    #[test]
    fn run_design_preserves_order() {
        let space = InputSpace::new_parameters(vec![Dimension {
            name: "x".into(),
            lower: 0.0,
            upper: 4.0,
        }])
        .unwrap();
        let design =
            DesignSet::new(space, vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let h = SimulatorHandle::in_process("square", 1, &["y"], |p| Ok(vec![p[0] * p[0]]));
        let run = run_design(&h, &design).unwrap();
        assert_eq!(run.responses, vec![vec![1.0], vec![4.0], vec![9.0]]);
    }

    #[test]
    fn run_design_sums_recomputed_independently() {
        let space = unit_space(2);
        let design = latin_hypercube(&space, 20, 5).unwrap();
        let h = SimulatorHandle::in_process("sum", 2, &["s"], |p| Ok(vec![p[0] + p[1]]));
        let run = run_design(&h, &design).unwrap();
        for (p, r) in run.points.iter().zip(&run.responses) {
            assert!((r[0] - (p[0] + p[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn run_design_error_carries_row() {
        let space = unit_space(1);
        let design = DesignSet::new(space, vec![vec![0.1], vec![0.2]]).unwrap();
        // Simulator declared with arity 2 but the design provides 1 value.
        let h = SimulatorHandle::in_process("needs2", 2, &["y"], |p| Ok(vec![p[0]]));
        match run_design(&h, &design) {
            Err(Error::DesignRow { row, .. }) => assert_eq!(row, 0),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let space = unit_space(2);
        let design = latin_hypercube(&space, 8, 21).unwrap();
        let h = SimulatorHandle::in_process("sum", 2, &["s"], |p| Ok(vec![p[0] + p[1]]));
        let run = run_design(&h, &design).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        save_csv(&run, &path).unwrap();
        let loaded = load_csv(&space, &path).unwrap();
        assert_eq!(loaded, run);
    }
}

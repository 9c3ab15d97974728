//! Black-box simulator contract and execution.
//!
//! A simulator is either an in-process function (used for tests and library
//! callers) or an external executable speaking a line protocol: the parent
//! writes one line of space-separated decimal inputs per evaluation to the
//! child's stdin, and the child replies with exactly one line of
//! space-separated decimal outputs, handling one request per line until
//! stdin closes. Values are written in shortest round-trip decimal form.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

type InProcessFn = Arc<dyn Fn(&[f64]) -> std::result::Result<Vec<f64>, String> + Send + Sync>;

/// Handle to a black-box simulator.
#[derive(Clone)]
pub enum SimulatorHandle {
    InProcess {
        name: String,
        arity: usize,
        output_names: Vec<String>,
        deterministic: bool,
        f: InProcessFn,
    },
    External {
        command: String,
        args: Vec<String>,
        output_names: Vec<String>,
        deterministic: bool,
        timeout: Duration,
    },
}

impl std::fmt::Debug for SimulatorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimulatorHandle::InProcess { name, arity, .. } => f
                .debug_struct("InProcess")
                .field("name", name)
                .field("arity", arity)
                .finish(),
            SimulatorHandle::External { command, args, .. } => f
                .debug_struct("External")
                .field("command", command)
                .field("args", args)
                .finish(),
        }
    }
}

impl SimulatorHandle {
    pub fn in_process<F>(name: &str, arity: usize, output_names: &[&str], f: F) -> Self
    where
        F: Fn(&[f64]) -> std::result::Result<Vec<f64>, String> + Send + Sync + 'static,
    {
        SimulatorHandle::InProcess {
            name: name.to_string(),
            arity,
            output_names: output_names.iter().map(|s| s.to_string()).collect(),
            deterministic: true,
            f: Arc::new(f),
        }
    }

    pub fn external(command: &str, args: &[&str], output_names: &[&str]) -> Self {
        SimulatorHandle::External {
            command: command.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            output_names: output_names.iter().map(|s| s.to_string()).collect(),
            deterministic: true,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        if let SimulatorHandle::External { timeout: t, .. } = &mut self {
            *t = timeout;
        }
        self
    }

    pub fn with_deterministic(mut self, value: bool) -> Self {
        match &mut self {
            SimulatorHandle::InProcess { deterministic, .. } => *deterministic = value,
            SimulatorHandle::External { deterministic, .. } => *deterministic = value,
        }
        self
    }

    pub fn output_names(&self) -> &[String] {
        match self {
            SimulatorHandle::InProcess { output_names, .. } => output_names,
            SimulatorHandle::External { output_names, .. } => output_names,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            SimulatorHandle::InProcess { deterministic, .. } => *deterministic,
            SimulatorHandle::External { deterministic, .. } => *deterministic,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.output_names().len()
    }
}

/// Evaluate the simulator at one point, returning one value per output name.
pub fn evaluate(handle: &SimulatorHandle, point: &[f64]) -> Result<Vec<f64>> {
    match handle {
        SimulatorHandle::InProcess { arity, f, .. } => {
            if point.len() != *arity {
                return Err(Error::DimensionMismatch {
                    expected: *arity,
                    got: point.len(),
                    context: " (simulator input)".into(),
                });
            }
            let out = f(point).map_err(|reason| Error::MalformedOutput {
                point: point.to_vec(),
                reason,
            })?;
            check_arity(handle, point, out)
        }
        SimulatorHandle::External { .. } => {
            let mut session = ExternalSession::spawn(handle)?;
            let out = session.request(point)?;
            check_arity(handle, point, out)
        }
    }
}

/// Evaluate many points: in parallel for in-process simulators, through one
/// persistent child process (requests in order) for external ones.
pub fn evaluate_many(handle: &SimulatorHandle, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match handle {
        SimulatorHandle::InProcess { .. } => {
            use rayon::prelude::*;
            points.par_iter().map(|p| evaluate(handle, p)).collect()
        }
        SimulatorHandle::External { .. } => {
            let mut session = ExternalSession::spawn(handle)?;
            points
                .iter()
                .map(|p| {
                    let out = session.request(p)?;
                    check_arity(handle, p, out)
                })
                .collect()
        }
    }
}

fn check_arity(handle: &SimulatorHandle, point: &[f64], out: Vec<f64>) -> Result<Vec<f64>> {
    if out.len() != handle.n_outputs() {
        return Err(Error::MalformedOutput {
            point: point.to_vec(),
            reason: format!(
                "expected {} outputs, got {}",
                handle.n_outputs(),
                out.len()
            ),
        });
    }
    Ok(out)
}

/// Format a point as one protocol line (shortest round-trip decimals).
pub fn format_line(point: &[f64]) -> String {
    let mut line = String::new();
    for (i, v) in point.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&format!("{v}"));
    }
    line.push('\n');
    line
}

/// A running external simulator child that can serve many requests.
///
/// One reader thread forwards stdout lines through a channel so each request
/// can be bounded by the configured timeout.
pub struct ExternalSession {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
    command: String,
}

impl ExternalSession {
    pub fn spawn(handle: &SimulatorHandle) -> Result<Self> {
        let SimulatorHandle::External {
            command,
            args,
            timeout,
            ..
        } = handle
        else {
            return Err(Error::InvalidDesign(
                "cannot open an external session on an in-process simulator".into(),
            ));
        };
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| Error::ProcessSpawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalSession {
            child,
            stdin,
            lines: rx,
            timeout: *timeout,
            command: command.clone(),
        })
    }

    pub fn request(&mut self, point: &[f64]) -> Result<Vec<f64>> {
        let line = format_line(point);
        if self.stdin.write_all(line.as_bytes()).is_err() || self.stdin.flush().is_err() {
            return Err(Error::SimulatorExited {
                point: point.to_vec(),
            });
        }
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                return Err(Error::MalformedOutput {
                    point: point.to_vec(),
                    reason: format!("read failure from `{}`: {e}", self.command),
                })
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(Error::SimulatorTimeout {
                    point: point.to_vec(),
                    timeout_secs: self.timeout.as_secs_f64(),
                });
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(Error::SimulatorExited {
                    point: point.to_vec(),
                })
            }
        };
        parse_reply(&reply, point)
    }
}

impl Drop for ExternalSession {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved child exit on its own.
        let _ = self.stdin.flush();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_reply(reply: &str, point: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for token in reply.split_whitespace() {
        let value: f64 = token.parse().map_err(|_| Error::MalformedOutput {
            point: point.to_vec(),
            reason: format!("non-numeric token `{token}`"),
        })?;
        out.push(value);
    }
    if out.is_empty() {
        return Err(Error::MalformedOutput {
            point: point.to_vec(),
            reason: "empty reply line".into(),
        });
    }
    Ok(out)
}

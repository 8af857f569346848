//! Line-oriented text format for Ising problems.
//!
//! ```text
//! # comment
//! ising 4
//! topology chain
//! h 0 0.25
//! J 0 1 -1.5
//! ```
//!
//! Indices are 0-based. The `topology` line is optional; without it the
//! topology is inferred from the couplings. Values are written in the
//! shortest form that parses back to the same `f64`, so files round-trip
//! bit-exactly. Generated problems carry a `# generator` comment naming
//! the variate stream (`gaussian-v1`: ChaCha8 seeded per variate index,
//! Box-Muller on two 53-bit uniforms, fields drawn before couplings).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sss_core::ising::Coupling;
use sss_core::{Family, IsingModel, Topology};

use crate::error::CliError;

/// Parses the text format. Errors carry the 1-based line number.
pub fn parse_problem(text: &str) -> Result<IsingModel, CliError> {
    let mut m: Option<usize> = None;
    let mut topology: Option<Topology> = None;
    let mut fields: Vec<f64> = Vec::new();
    let mut couplings = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |msg: String| CliError::Format { line: line_no, msg };
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let index = |s: &str| -> Result<usize, CliError> {
            let i: usize = s.parse().map_err(|_| err(format!("bad index `{s}`")))?;
            match m {
                Some(m) if i < m => Ok(i),
                Some(m) => Err(err(format!("index {i} out of range for {m} spins"))),
                None => Err(err("`ising <m>` header must come first".into())),
            }
        };
        let value = |s: &str| -> Result<f64, CliError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad value `{s}`")))
        };
        match words.as_slice() {
            ["ising", n] => {
                if m.is_some() {
                    return Err(err("duplicate header".into()));
                }
                let n: usize = n.parse().map_err(|_| err(format!("bad spin count `{n}`")))?;
                m = Some(n);
                fields = vec![0.0; n];
            }
            ["topology", rest @ ..] => topology = Some(parse_topology(rest).map_err(err)?),
            ["h", i, v] => {
                let i = index(i)?;
                fields[i] = value(v)?;
            }
            ["J", i, j, v] => {
                let (i, j) = (index(i)?, index(j)?);
                if i == j {
                    return Err(err("self-coupling".into()));
                }
                couplings.push(Coupling {
                    i: i.min(j),
                    j: i.max(j),
                    value: value(v)?,
                });
            }
            _ => return Err(err(format!("unrecognised line `{line}`"))),
        }
    }
    if m.is_none() {
        return Err(CliError::Format {
            line: 0,
            msg: "missing `ising <m>` header".into(),
        });
    }
    let model = match topology {
        Some(t) => IsingModel::new(fields, couplings, t),
        None => IsingModel::with_inferred_topology(fields, couplings),
    };
    model.map_err(CliError::from)
}

fn parse_topology(words: &[&str]) -> Result<Topology, String> {
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format!("bad grid size `{s}`"));
    match words {
        ["independent"] => Ok(Topology::Independent),
        ["chain"] => Ok(Topology::Chain),
        ["complete"] => Ok(Topology::Complete),
        ["sparse"] => Ok(Topology::Sparse),
        ["grid3d", x, y, z, bc] => Ok(Topology::Grid {
            lx: dim(x)?,
            ly: dim(y)?,
            lz: dim(z)?,
            periodic: match *bc {
                "periodic" => true,
                "open" => false,
                other => return Err(format!("bad boundary `{other}`")),
            },
        }),
        _ => Err(format!("bad topology `{}`", words.join(" "))),
    }
}

/// Writes the text format. Zero fields are omitted.
pub fn format_problem(model: &IsingModel, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    let _ = writeln!(out, "ising {}", model.num_spins());
    let _ = writeln!(out, "topology {}", model.topology());
    for (i, &h) in model.fields().iter().enumerate() {
        if h != 0.0 {
            let _ = writeln!(out, "h {i} {h}");
        }
    }
    for c in model.couplings() {
        let _ = writeln!(out, "J {} {} {}", c.i, c.j, c.value);
    }
    out
}

pub fn read_problem(path: &Path) -> Result<IsingModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_problem(&text)
}

/// Problem family from a command-line name and sizes.
pub fn family_from_args(name: &str, sizes: &[usize], periodic: bool) -> Result<Family, CliError> {
    let one = || match sizes {
        [m] => Ok(*m),
        _ => Err(CliError::usage(format!("`{name}` takes one size"))),
    };
    match name {
        "independent" => Ok(Family::Independent { m: one()? }),
        "chain" => Ok(Family::Chain { m: one()? }),
        "sk" => Ok(Family::Sk { m: one()? }),
        "grid3d" => match sizes {
            [l] => Ok(Family::Grid3d {
                lx: *l,
                ly: *l,
                lz: *l,
                periodic,
            }),
            [lx, ly, lz] => Ok(Family::Grid3d {
                lx: *lx,
                ly: *ly,
                lz: *lz,
                periodic,
            }),
            _ => Err(CliError::usage("`grid3d` takes one or three sizes".into())),
        },
        other => Err(CliError::usage(format!(
            "unknown family `{other}` (independent, chain, sk, grid3d)"
        ))),
    }
}

pub fn family_description(family: Family) -> String {
    match family {
        Family::Independent { m } => format!("independent {m}"),
        Family::Chain { m } => format!("chain {m}"),
        Family::Sk { m } => format!("sk {m}"),
        Family::Grid3d { lx, ly, lz, periodic } => {
            format!("grid3d {lx} {ly} {lz}{}", if periodic { " periodic" } else { "" })
        }
    }
}

//! Comma-separated sample and chain tables.
//!
//! Every file starts with `#` lines carrying `key=value` metadata (format
//! name, seed, config hash, beta), then a column header, one row per
//! record, and a trailing `# summary` line. Floats are written in their
//! shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sss_core::montecarlo::{estimate_logz, weight_diagnostics, WeightedSample};
use sss_core::SpinState;

use crate::error::CliError;

pub const SAMPLE_COLUMNS: &str = "index,tree,state,energy,log_q,refresh_calls,fallback";
pub const CHAIN_COLUMNS: &str = "step,state,energy,accepted";

/// `key=value` pairs of the `#` lines, in order.
pub type Meta = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub index: usize,
    pub tree: usize,
    pub state: SpinState,
    pub energy: f64,
    pub log_q: f64,
    pub refresh_calls: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplesFile {
    pub meta: Meta,
    pub rows: Vec<SampleRow>,
    pub summary: Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRow {
    pub step: usize,
    pub state: SpinState,
    pub energy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainFile {
    pub meta: Meta,
    pub rows: Vec<ChainRow>,
    pub summary: Meta,
}

pub fn meta_get<'a>(meta: &'a Meta, key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn write_meta(out: &mut String, prefix: &str, meta: &Meta) {
    out.push('#');
    if !prefix.is_empty() {
        out.push(' ');
        out.push_str(prefix);
    }
    for (k, v) in meta {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
}

fn parse_meta(text: &str, line: usize) -> Result<Meta, CliError> {
    text.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::Format {
                    line,
                    msg: format!("expected key=value, got `{kv}`"),
                })
        })
        .collect()
}

/// Metadata, numbered data lines and summary of a table.
type Sections<'a> = (Meta, Vec<(usize, &'a str)>, Meta);

/// Splits a table into metadata, header-checked rows and summary.
fn split_table<'a>(text: &'a str, columns: &str) -> Result<Sections<'a>, CliError> {
    let mut meta = Meta::new();
    let mut summary = Meta::new();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(s) = rest.strip_prefix("summary") {
                summary = parse_meta(s, line_no)?;
            } else {
                meta.extend(parse_meta(rest, line_no)?);
            }
        } else if !header_seen {
            if line.trim() != columns {
                return Err(CliError::Format {
                    line: line_no,
                    msg: format!("expected header `{columns}`"),
                });
            }
            header_seen = true;
        } else if !line.trim().is_empty() {
            rows.push((line_no, line));
        }
    }
    if !header_seen {
        return Err(CliError::Format {
            line: 0,
            msg: "missing column header".into(),
        });
    }
    Ok((meta, rows, summary))
}

fn field<T: std::str::FromStr>(value: Option<&str>, line: usize, name: &str) -> Result<T, CliError> {
    value.and_then(|v| v.parse().ok()).ok_or_else(|| CliError::Format {
        line,
        msg: format!("bad or missing `{name}`"),
    })
}

fn flag(value: Option<&str>, line: usize, name: &str) -> Result<bool, CliError> {
    match value {
        Some("0") => Ok(false),
        Some("1") => Ok(true),
        _ => Err(CliError::Format {
            line,
            msg: format!("bad or missing `{name}`"),
        }),
    }
}

impl SamplesFile {
    pub fn format(&self) -> String {
        let mut out = String::new();
        write_meta(&mut out, "", &self.meta);
        out.push_str(SAMPLE_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index, r.tree, r.state, r.energy, r.log_q, r.refresh_calls, r.fallback as u8
            );
        }
        write_meta(&mut out, "summary", &self.summary);
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let (meta, lines, summary) = split_table(text, SAMPLE_COLUMNS)?;
        let rows = lines
            .into_iter()
            .map(|(n, line)| {
                let mut it = line.split(',');
                Ok(SampleRow {
                    index: field(it.next(), n, "index")?,
                    tree: field(it.next(), n, "tree")?,
                    state: field(it.next(), n, "state")?,
                    energy: field(it.next(), n, "energy")?,
                    log_q: field(it.next(), n, "log_q")?,
                    refresh_calls: field(it.next(), n, "refresh_calls")?,
                    fallback: flag(it.next(), n, "fallback")?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(SamplesFile { meta, rows, summary })
    }

    pub fn beta(&self) -> Result<f64, CliError> {
        field(meta_get(&self.meta, "beta"), 1, "beta")
    }

    /// Importance weights rebuilt from the table alone.
    pub fn weighted(&self) -> Result<Vec<WeightedSample>, CliError> {
        let beta = self.beta()?;
        Ok(self
            .rows
            .iter()
            .map(|r| WeightedSample {
                state: r.state.clone(),
                log_q: r.log_q,
                log_pi_tilde: -beta * r.energy,
                log_w: -beta * r.energy - r.log_q,
            })
            .collect())
    }
}

/// Summary statistics of weighted draws. Fewer than two draws give no
/// estimates.
pub fn sample_summary(samples: &[WeightedSample]) -> Meta {
    let mut s = vec![("draws".to_string(), samples.len().to_string())];
    match (estimate_logz(samples), weight_diagnostics(samples)) {
        (Ok(z), Ok(d)) => {
            s.push(("log_z_hat".into(), z.log_z.to_string()));
            s.push(("log_std_error".into(), z.log_std_error.to_string()));
            s.push(("relative_std_error".into(), z.relative_std_error.to_string()));
            s.push(("weight_variance".into(), d.variance.to_string()));
            s.push(("ess".into(), d.ess.to_string()));
        }
        _ => s.push(("estimates".into(), "none".into())),
    }
    s
}

impl ChainFile {
    pub fn format(&self) -> String {
        let mut out = String::new();
        write_meta(&mut out, "", &self.meta);
        out.push_str(CHAIN_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.state, r.energy, r.accepted as u8);
        }
        write_meta(&mut out, "summary", &self.summary);
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let (meta, lines, summary) = split_table(text, CHAIN_COLUMNS)?;
        let rows = lines
            .into_iter()
            .map(|(n, line)| {
                let mut it = line.split(',');
                Ok(ChainRow {
                    step: field(it.next(), n, "step")?,
                    state: field(it.next(), n, "state")?,
                    energy: field(it.next(), n, "energy")?,
                    accepted: flag(it.next(), n, "accepted")?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(ChainFile { meta, rows, summary })
    }

    /// Visit frequencies of the states after the initial one.
    pub fn visits(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in self.rows.iter().skip(1) {
            *counts.entry(r.state.to_string()).or_insert(0) += 1;
        }
        counts
    }
}

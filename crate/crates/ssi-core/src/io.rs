//! CSV and JSON file formats. Tabular data carries a header row naming the
//! columns and one leading `#` metadata line; floats are written with 17
//! significant digits so doubles round-trip exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SsiError};
use crate::gp::{FlowDataset, GpHamiltonianModel};
use crate::integrate::{MethodTag, TrajectoryRecord};
use crate::phase::PhaseState;
use crate::stats::EnergySeries;

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(field: &str, line: u64, column: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| SsiError::Parse {
        line,
        column,
        message: format!("expected a floating-point number, got {field:?}"),
    })
}

fn metadata_line(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

/// Split a leading `# key=value ...` line off the file content.
fn split_metadata(content: &str) -> (HashMap<String, String>, &str, u64) {
    if let Some(rest) = content.strip_prefix('#') {
        let (line, remainder) = match rest.split_once('\n') {
            Some((l, r)) => (l, r),
            None => (rest, ""),
        };
        let mut map = HashMap::new();
        for token in line.split_whitespace() {
            if let Some((k, v)) = token.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        (map, remainder, 1)
    } else {
        (HashMap::new(), content, 0)
    }
}

fn meta_f64(meta: &HashMap<String, String>, key: &str) -> Result<f64> {
    let raw = meta.get(key).ok_or_else(|| SsiError::Parse {
        line: 1,
        column: 1,
        message: format!("missing metadata entry {key:?}"),
    })?;
    parse_f64(raw, 1, 1)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    meta: HashMap<String, String>,
}

fn read_table(path: &Path) -> Result<Table> {
    let content = fs::read_to_string(path)?;
    let (meta, body, line_offset) = split_metadata(&content);
    let mut lines = body.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) if !l.trim().is_empty() => {
            l.split(',').map(|s| s.trim().to_string()).collect()
        }
        _ => {
            return Err(SsiError::Parse {
                line: line_offset + 1,
                column: 1,
                message: "missing header row".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let line_no = line_offset + i as u64 + 1;
        let mut row = Vec::new();
        for (c, field) in l.split(',').enumerate() {
            row.push(parse_f64(field, line_no, c as u64 + 1)?);
        }
        if row.len() != header.len() {
            return Err(SsiError::Parse {
                line: line_no,
                column: row.len() as u64,
                message: format!(
                    "expected {} columns, got {}",
                    header.len(),
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok(Table { header, rows, meta })
}

fn expect_header(table: &Table, expected: &[String]) -> Result<()> {
    if table.header != expected {
        return Err(SsiError::Parse {
            line: 1,
            column: 1,
            message: format!(
                "unexpected header: expected {:?}, got {:?}",
                expected.join(","),
                table.header.join(",")
            ),
        });
    }
    Ok(())
}

fn block_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn write_flow_dataset(path: &Path, data: &FlowDataset) -> Result<()> {
    let n = data.y[0].n();
    let mut out = fs::File::create(path)?;
    out.write_all(metadata_line(&[("h", fmt_f64(data.h))]).as_bytes())?;
    let mut header: Vec<String> = Vec::new();
    header.extend(block_names("q", n));
    header.extend(block_names("p", n));
    header.extend(block_names("qbar", n));
    header.extend(block_names("pbar", n));
    writeln!(out, "{}", header.join(","))?;
    for (y, ybar) in data.y.iter().zip(&data.ybar) {
        let fields: Vec<String> = y
            .as_slice()
            .iter()
            .chain(ybar.as_slice())
            .map(|&v| fmt_f64(v))
            .collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_flow_dataset(path: &Path) -> Result<FlowDataset> {
    let table = read_table(path)?;
    if table.header.len() % 4 != 0 || table.header.is_empty() {
        return Err(SsiError::Parse {
            line: 1,
            column: 1,
            message: format!("dataset needs 4n columns, got {}", table.header.len()),
        });
    }
    let n = table.header.len() / 4;
    let mut expected: Vec<String> = Vec::new();
    expected.extend(block_names("q", n));
    expected.extend(block_names("p", n));
    expected.extend(block_names("qbar", n));
    expected.extend(block_names("pbar", n));
    expect_header(&table, &expected)?;
    let h = meta_f64(&table.meta, "h")?;
    let mut y = Vec::with_capacity(table.rows.len());
    let mut ybar = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        y.push(PhaseState::new(&row[..n], &row[n..2 * n])?);
        ybar.push(PhaseState::new(&row[2 * n..3 * n], &row[3 * n..])?);
    }
    FlowDataset::new(y, ybar, h)
}

/// Write a trajectory as `t, q1..qn, p1..pn` plus optional named scalar
/// columns (energies along the trajectory).
pub fn write_trajectory(
    path: &Path,
    traj: &TrajectoryRecord,
    extras: &[(&str, &[f64])],
) -> Result<()> {
    let n = traj.states[0].n();
    for (name, values) in extras {
        if values.len() != traj.states.len() {
            return Err(SsiError::InvalidArgument(format!(
                "extra column {name:?} has {} values for {} states",
                values.len(),
                traj.states.len()
            )));
        }
    }
    let mut out = fs::File::create(path)?;
    out.write_all(
        metadata_line(&[
            ("method", traj.method_tag.to_string()),
            ("field", traj.field_tag.clone()),
            ("t0", fmt_f64(traj.t0)),
            ("h", fmt_f64(traj.h)),
        ])
        .as_bytes(),
    )?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(block_names("q", n));
    header.extend(block_names("p", n));
    header.extend(extras.iter().map(|(name, _)| name.to_string()));
    writeln!(out, "{}", header.join(","))?;
    let mut buf = std::io::BufWriter::new(out);
    for (i, z) in traj.states.iter().enumerate() {
        let mut fields: Vec<String> = vec![fmt_f64(traj.time_at(i))];
        fields.extend(z.as_slice().iter().map(|&v| fmt_f64(v)));
        fields.extend(extras.iter().map(|(_, vals)| fmt_f64(vals[i])));
        writeln!(buf, "{}", fields.join(","))?;
    }
    buf.flush()?;
    Ok(())
}

/// Read a trajectory back; returns any extra columns alongside.
pub fn read_trajectory(path: &Path) -> Result<(TrajectoryRecord, Vec<(String, Vec<f64>)>)> {
    let table = read_table(path)?;
    if table.header.first().map(String::as_str) != Some("t") {
        return Err(SsiError::Parse {
            line: 1,
            column: 1,
            message: "trajectory file must start with a t column".into(),
        });
    }
    let n_cols = table.header.len();
    let n = table
        .header
        .iter()
        .filter(|name| name.starts_with('q') && name[1..].parse::<usize>().is_ok())
        .count();
    if n == 0 || n_cols < 1 + 2 * n {
        return Err(SsiError::Parse {
            line: 1,
            column: 1,
            message: "trajectory file must contain q and p columns".into(),
        });
    }
    let method = match table.meta.get("method").map(String::as_str) {
        Some("symplectic_euler") => MethodTag::SymplecticEuler,
        Some("implicit_midpoint") => MethodTag::ImplicitMidpoint,
        Some("stormer_verlet") => MethodTag::StormerVerlet,
        other => {
            return Err(SsiError::Parse {
                line: 1,
                column: 1,
                message: format!("missing or unknown method tag {other:?}"),
            })
        }
    };
    let field_tag = table.meta.get("field").cloned().unwrap_or_default();
    let t0 = meta_f64(&table.meta, "t0")?;
    let h = meta_f64(&table.meta, "h")?;

    let mut states = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        states.push(PhaseState::new(&row[1..1 + n], &row[1 + n..1 + 2 * n])?);
    }
    let mut extras = Vec::new();
    for c in (1 + 2 * n)..n_cols {
        let values: Vec<f64> = table.rows.iter().map(|row| row[c]).collect();
        extras.push((table.header[c].clone(), values));
    }
    Ok((
        TrajectoryRecord {
            states,
            h,
            t0,
            method_tag: method,
            field_tag,
        },
        extras,
    ))
}

pub fn write_energy_series(path: &Path, series: &EnergySeries) -> Result<()> {
    let mut out = fs::File::create(path)?;
    out.write_all(
        metadata_line(&[("t0", fmt_f64(series.t0)), ("h", fmt_f64(series.h))]).as_bytes(),
    )?;
    writeln!(out, "t,energy")?;
    let mut buf = std::io::BufWriter::new(out);
    for (i, &v) in series.values.iter().enumerate() {
        writeln!(buf, "{},{}", fmt_f64(series.time_at(i)), fmt_f64(v))?;
    }
    buf.flush()?;
    Ok(())
}

pub fn read_energy_series(path: &Path) -> Result<EnergySeries> {
    let table = read_table(path)?;
    if table.header.len() < 2 || table.header[0] != "t" {
        return Err(SsiError::Parse {
            line: 1,
            column: 1,
            message: format!(
                "energy series needs columns t,<value>, got {:?}",
                table.header.join(",")
            ),
        });
    }
    let t0 = meta_f64(&table.meta, "t0")?;
    let h = meta_f64(&table.meta, "h")?;
    Ok(EnergySeries {
        t0,
        h,
        values: table.rows.iter().map(|r| r[1]).collect(),
    })
}

pub fn save_model(path: &Path, model: &GpHamiltonianModel) -> Result<()> {
    let json = model.to_json()?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GpHamiltonianModel> {
    let json = fs::read_to_string(path)?;
    GpHamiltonianModel::from_json(&json)
}

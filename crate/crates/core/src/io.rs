//! Text exports of conditional operators and effective distributions.
//!
//! Both formats start with one `# {json}` metadata line. Floats are written
//! with 17 significant digits, which round-trips every `f64`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::join_ids;
use crate::distribution::{ConditionalOperator, OperatorMeta};
use crate::error::{Error, Result};
use crate::truncation::{EffectiveDistribution, Provenance};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorHeader {
    pub k: usize,
    pub l: usize,
    pub alphabet_size: usize,
    pub num_x: usize,
    pub num_y: usize,
    #[serde(flatten)]
    pub meta: OperatorMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn header(op: &ConditionalOperator, provenance: Option<&Provenance>) -> OperatorHeader {
    OperatorHeader {
        k: op.k,
        l: op.l,
        alphabet_size: op.alphabet_size,
        num_x: op.num_x(),
        num_y: op.num_y(),
        meta: op.meta.clone(),
        provenance: provenance.cloned(),
    }
}

fn space_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn write_header<W: Write>(w: &mut W, h: &OperatorHeader) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(h)?)?;
    Ok(())
}

/// Dense CSV: one row per context, `x,q_x,p(y_1|x),...`, ids space-separated.
pub fn write_operator_csv<W: Write>(op: &ConditionalOperator, provenance: Option<&Provenance>, mut w: W) -> Result<()> {
    write_header(&mut w, &header(op, provenance))?;
    let ys: Vec<String> = op.y_labels.iter().map(|y| space_ids(y)).collect();
    writeln!(w, "x,q_x,{}", ys.join(","))?;
    for x in 0..op.num_x() {
        let row: Vec<String> = (0..op.num_y()).map(|y| fmt_f64(op.matrix[(y, x)])).collect();
        writeln!(w, "{},{},{}", space_ids(&op.x_labels[x]), fmt_f64(op.marginal[x]), row.join(","))?;
    }
    Ok(())
}

/// Sparse TSV: `x_ids<TAB>y_ids<TAB>q(y|x)<TAB>q(x)` for nonzero entries.
pub fn write_operator_tsv<W: Write>(op: &ConditionalOperator, provenance: Option<&Provenance>, mut w: W) -> Result<()> {
    write_header(&mut w, &header(op, provenance))?;
    for x in 0..op.num_x() {
        for y in 0..op.num_y() {
            let p = op.matrix[(y, x)];
            if p != 0.0 {
                let (xs, ys) = (join_ids(&op.x_labels[x]), join_ids(&op.y_labels[y]));
                writeln!(w, "{xs}\t{ys}\t{}\t{}", fmt_f64(p), fmt_f64(op.marginal[x]))?;
            }
        }
    }
    Ok(())
}

fn parse_space_ids(s: &str, line: usize) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Format { line, message: format!("invalid id `{t}`") }))
        .collect()
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Format { line, message: format!("invalid number `{s}`") })
}

/// Reads [`write_operator_csv`] output back, with its header.
pub fn read_operator_csv<R: BufRead>(reader: R) -> Result<(ConditionalOperator, OperatorHeader)> {
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.ok_or(Error::Format { line: 1, message: "empty file".into() })?;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format { line: 1, message: "missing `# {json}` header".into() })?;
    let h: OperatorHeader = serde_json::from_str(json)?;
    let cols = lines.next().transpose()?.ok_or(Error::Format { line: 2, message: "missing column header".into() })?;
    let names: Vec<&str> = cols.split(',').collect();
    if names.len() < 2 || names[0] != "x" || names[1] != "q_x" {
        return Err(Error::Format { line: 2, message: "expected `x,q_x,...` column header".into() });
    }
    let y_labels = names[2..].iter().map(|s| parse_space_ids(s, 2)).collect::<Result<Vec<_>>>()?;
    let (mut x_labels, mut marginal, mut entries) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let no = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != y_labels.len() + 2 {
            return Err(Error::Format { line: no, message: format!("expected {} fields", y_labels.len() + 2) });
        }
        x_labels.push(parse_space_ids(fields[0], no)?);
        marginal.push(parse_f64(fields[1], no)?);
        for f in &fields[2..] {
            entries.push(parse_f64(f, no)?);
        }
    }
    if x_labels.len() != h.num_x || y_labels.len() != h.num_y {
        return Err(Error::Format { line: 1, message: "header sizes do not match the table".into() });
    }
    let (nx, ny) = (x_labels.len(), y_labels.len());
    let matrix = DMatrix::from_fn(ny, nx, |y, x| entries[x * ny + y]);
    let mut op = ConditionalOperator::new(h.k, h.l, h.alphabet_size, x_labels, y_labels, matrix, DVector::from_vec(marginal))?;
    op.meta = h.meta.clone();
    Ok((op, h))
}

pub fn write_effective_csv<W: Write>(eff: &EffectiveDistribution, w: W) -> Result<()> {
    write_operator_csv(&eff.operator, Some(&eff.provenance), w)
}

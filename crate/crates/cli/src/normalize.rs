use std::io::Read;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use savt::normalizers::{entmax15_bisect, entmax15_sort, softmax, Normalizer, NormalizerResult, DEFAULT_BISECT_TOL};
use serde::Serialize;

use crate::inputs::emit;
use crate::settings::{usage, Settings};

const CROSS_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Sort,
    Bisect,
}

#[derive(clap::Args, Debug)]
pub struct NormalizeArgs {
    /// CSV (one row of logits per line) or a JSON array of rows; `-` reads stdin.
    #[arg(long)]
    input: String,
    #[arg(long, default_value = "entmax15")]
    normalizer: Normalizer,
    #[arg(long, value_enum, default_value = "sort")]
    solver: Solver,
    /// Also run the other entmax solver and fail if they disagree beyond 1e-9.
    #[arg(long)]
    cross_check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Row {
    p: Vec<f64>,
    tau: Option<f64>,
    support_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_check_max_dev: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    normalizer: Normalizer,
    solver: Option<Solver>,
    rows: Vec<Row>,
}

fn parse_number(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .or_else(|_| usage(format!("line {line}: `{}` is not a number", s.trim())))?;
    if !v.is_finite() {
        return usage(format!("line {line}: logits must be finite"));
    }
    Ok(v)
}

fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.or_else(|e| usage(format!("malformed CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let row = record.iter().map(|f| parse_number(f, line)).collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn parse_json(text: &str) -> Result<Vec<Vec<f64>>> {
    serde_json::from_str(text).or_else(|e| usage(format!("line {}: invalid JSON logits: {e}", e.line())))
}

pub fn parse_rows(text: &str, json: bool) -> Result<Vec<Vec<f64>>> {
    let rows = if json { parse_json(text)? } else { parse_csv(text)? };
    if let Some(i) = rows.iter().position(Vec::is_empty) {
        return usage(format!("row {} is empty", i + 1));
    }
    Ok(rows)
}

fn solve(z: &[f64], solver: Solver) -> Result<NormalizerResult<f64>> {
    Ok(match solver {
        Solver::Sort => entmax15_sort(z)?,
        Solver::Bisect => entmax15_bisect(z, DEFAULT_BISECT_TOL)?,
    })
}

pub fn run(_settings: &Settings, args: NormalizeArgs) -> Result<()> {
    let text = if args.input == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input))?
    };
    let json = args.input.ends_with(".json") || text.trim_start().starts_with('[');
    let rows = parse_rows(&text, json)?;

    let mut out = Vec::with_capacity(rows.len());
    for (i, z) in rows.iter().enumerate() {
        let (res, dev) = match args.normalizer {
            Normalizer::Softmax => (softmax(z)?, None),
            Normalizer::Entmax15 => {
                let res = solve(z, args.solver)?;
                let dev = if args.cross_check {
                    let other = match args.solver {
                        Solver::Sort => Solver::Bisect,
                        Solver::Bisect => Solver::Sort,
                    };
                    let alt = solve(z, other)?;
                    let d = res.p().iter().zip(alt.p()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    if d > CROSS_CHECK_TOL {
                        anyhow::bail!("row {}: solvers disagree by {d:e} (tolerance {CROSS_CHECK_TOL:e})", i + 1);
                    }
                    Some(d)
                } else {
                    None
                };
                (res, dev)
            }
        };
        out.push(Row {
            tau: res.try_tau(),
            support_size: res.support_size(),
            p: res.into_p(),
            cross_check_max_dev: dev,
        });
    }
    let report = Report {
        normalizer: args.normalizer,
        solver: (args.normalizer == Normalizer::Entmax15).then_some(args.solver),
        rows: out,
    };
    emit(&report, args.out.as_ref())
}

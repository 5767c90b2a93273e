//! Experiment grids over character-slot settings, with word-level baselines
//! and a tab-separated results table.

use std::fmt::Write as _;

use thiserror::Error;

use crate::char_encoding::CharOrder;
use crate::config::RunConfig;
use crate::evaluation::{relative_change, relative_improvement};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridSpecError {
    #[error("grid line {line}: {msg}")]
    Line { line: usize, msg: String },
}

/// Lists of values to cross. Empty `n_chars` means an empty grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridSpec {
    pub n_chars: Vec<usize>,
    pub char_emb: Vec<usize>,
    pub order: Vec<CharOrder>,
    pub shared: Vec<bool>,
    pub random_control: Vec<bool>,
    /// Hidden sizes of word-level baselines, e.g. `[200, 175]`.
    pub baselines: Vec<usize>,
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn range_or_num(s: &str) -> Result<Vec<usize>, String> {
    match s.split_once("..=") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.parse().map_err(|e| format!("`{s}`: {e}"))?]),
    }
}

fn or_default<T: Clone>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

impl GridSpec {
    /// `key = v1, v2, ...` lines; `n_chars` also accepts ranges like `1..=10`.
    pub fn parse(text: &str) -> Result<Self, GridSpecError> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| GridSpecError::Line { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = values`".into()))?;
            let v = v.trim();
            match k.trim() {
                "n_chars" => {
                    spec.n_chars = list(v, range_or_num).map_err(err)?.into_iter().flatten().collect();
                }
                "char_emb" => spec.char_emb = list(v, |s| s.parse().map_err(|e| format!("{e}"))).map_err(err)?,
                "char_order" => spec.order = list(v, str::parse).map_err(err)?,
                "shared_weights" => spec.shared = list(v, boolean).map_err(err)?,
                "random_control" => spec.random_control = list(v, boolean).map_err(err)?,
                "baselines" => spec.baselines = list(v, |s| s.parse().map_err(|e| format!("{e}"))).map_err(err)?,
                other => return Err(err(format!("unknown grid key `{other}`"))),
            }
        }
        Ok(spec)
    }

    /// Cartesian product, with unspecified axes taken from `base`.
    pub fn points(&self, base: &RunConfig) -> Vec<GridPoint> {
        let embs = or_default(&self.char_emb, base.cw.char_emb);
        let orders = or_default(&self.order, base.cw.order);
        let shared = or_default(&self.shared, base.cw.shared_weights);
        let random = or_default(&self.random_control, base.cw.random_control);
        let mut out = Vec::new();
        for &char_emb in &embs {
            for &order in &orders {
                for &sh in &shared {
                    for &rc in &random {
                        for &n in &self.n_chars {
                            out.push(GridPoint {
                                n_chars: n,
                                char_emb,
                                order,
                                shared: sh,
                                random_control: rc,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPoint {
    pub n_chars: usize,
    pub char_emb: usize,
    pub order: CharOrder,
    pub shared: bool,
    pub random_control: bool,
}

impl GridPoint {
    pub fn label(&self) -> String {
        let mut s = format!("c{}_n{}_{}", self.char_emb, self.n_chars, self.order);
        if self.shared {
            s.push_str("_shared");
        }
        if self.random_control {
            s.push_str("_random");
        }
        s
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.cw.n_chars = self.n_chars;
        cfg.cw.char_emb = self.char_emb;
        cfg.cw.order = self.order;
        cfg.cw.shared_weights = self.shared;
        cfg.cw.random_control = self.random_control;
        cfg
    }

    fn real_counterpart(&self) -> Self {
        Self {
            random_control: false,
            ..*self
        }
    }
}

/// What a single training run reports back to the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointOutcome {
    pub valid_ppl: f64,
    pub test_ppl: Option<f64>,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok(PointOutcome),
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    Baseline { hidden: usize },
    Point(GridPoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub kind: RowKind,
    pub status: RowStatus,
}

impl GridRow {
    pub fn outcome(&self) -> Option<&PointOutcome> {
        match &self.status {
            RowStatus::Ok(o) => Some(o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub base_hidden: usize,
    pub rows: Vec<GridRow>,
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.prec$}"))
}

impl GridTable {
    pub fn points(&self) -> impl Iterator<Item = &GridRow> {
        self.rows.iter().filter(|r| matches!(r.kind, RowKind::Point(_)))
    }

    pub fn skipped(&self) -> impl Iterator<Item = &GridRow> {
        self.rows.iter().filter(|r| matches!(r.status, RowStatus::Skipped(_)))
    }

    fn baselines(&self) -> Vec<(usize, Option<&PointOutcome>)> {
        self.rows
            .iter()
            .filter_map(|r| match r.kind {
                RowKind::Baseline { hidden } => Some((hidden, r.outcome())),
                _ => None,
            })
            .collect()
    }

    /// Baseline used for the relative-change column: the one with the base
    /// hidden size, else the first.
    fn reference_baseline(&self) -> Option<&PointOutcome> {
        let b = self.baselines();
        b.iter()
            .find(|(h, _)| *h == self.base_hidden)
            .or_else(|| b.first())
            .and_then(|(_, o)| *o)
    }

    fn counterpart(&self, p: &GridPoint) -> Option<&PointOutcome> {
        let want = p.real_counterpart();
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Point(want))
            .and_then(GridRow::outcome)
    }

    /// Relative change of validation perplexity of a random-control row with
    /// respect to the reference baseline and to its real-character twin.
    pub fn random_changes(&self, row: &GridRow) -> (Option<f64>, Option<f64>) {
        let (RowKind::Point(p), Some(o)) = (&row.kind, row.outcome()) else {
            return (None, None);
        };
        if !p.random_control {
            return (None, None);
        }
        let vs_base = self.reference_baseline().map(|b| relative_change(o.valid_ppl, b.valid_ppl));
        let vs_cw = self.counterpart(p).map(|c| relative_change(o.valid_ppl, c.valid_ppl));
        (vs_base, vs_cw)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "label", "hidden", "n_chars", "char_emb", "char_order", "shared", "random", "params", "valid_ppl",
            "test_ppl",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for (hidden, _) in self.baselines() {
            h.push(format!("impr_vs_w{hidden}"));
        }
        h.push("rel_change_valid_vs_baseline".into());
        h.push("rel_change_valid_vs_cw".into());
        h.push("status".into());
        h
    }

    /// Tab-separated table with a header row. Improvements compare test
    /// perplexities when both runs have one, validation otherwise.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.header().join("\t")).unwrap();
        let baselines = self.baselines();
        for row in &self.rows {
            let mut cells = vec![row.label.clone()];
            match &row.kind {
                RowKind::Baseline { hidden } => {
                    cells.extend([hidden.to_string(), "0".into(), "0".into(), "-".into(), "-".into(), "-".into()]);
                }
                RowKind::Point(p) => cells.extend([
                    self.base_hidden.to_string(),
                    p.n_chars.to_string(),
                    p.char_emb.to_string(),
                    p.order.to_string(),
                    p.shared.to_string(),
                    p.random_control.to_string(),
                ]),
            }
            let o = row.outcome();
            cells.push(o.map_or_else(|| "NA".into(), |o| o.params.to_string()));
            cells.push(fmt_opt(o.map(|o| o.valid_ppl), 4));
            cells.push(fmt_opt(o.and_then(|o| o.test_ppl), 4));
            for (_, b) in &baselines {
                let impr = match (o, b) {
                    (Some(o), Some(b)) => Some(match (o.test_ppl, b.test_ppl) {
                        (Some(c), Some(r)) => relative_improvement(c, r),
                        _ => relative_improvement(o.valid_ppl, b.valid_ppl),
                    }),
                    _ => None,
                };
                cells.push(fmt_opt(impr, 2));
            }
            let (vs_base, vs_cw) = self.random_changes(row);
            cells.push(fmt_opt(vs_base, 2));
            cells.push(fmt_opt(vs_cw, 2));
            cells.push(match &row.status {
                RowStatus::Ok(_) => "ok".into(),
                RowStatus::Skipped(m) => format!("skipped: {m}"),
                RowStatus::Failed(m) => format!("failed: {m}"),
            });
            writeln!(out, "{}", cells.join("\t")).unwrap();
        }
        out
    }
}

/// Run baselines, then every grid point. Points whose configuration is
/// invalid are recorded as skipped; runner failures are recorded and the
/// grid continues.
pub fn run_grid(
    base: &RunConfig,
    spec: &GridSpec,
    runner: &mut dyn FnMut(&str, &RunConfig) -> Result<PointOutcome, String>,
) -> GridTable {
    let mut table = GridTable {
        base_hidden: base.train.hidden,
        rows: Vec::new(),
    };
    let points = spec.points(base);
    if points.is_empty() {
        return table;
    }
    let mut run = |label: String, kind: RowKind, cfg: RunConfig| {
        let status = match cfg.validate() {
            Err((_, msg)) => RowStatus::Skipped(msg),
            Ok(()) => match runner(&label, &cfg) {
                Ok(o) => RowStatus::Ok(o),
                Err(e) => RowStatus::Failed(e),
            },
        };
        GridRow { label, kind, status }
    };
    for &hidden in &spec.baselines {
        let mut cfg = base.clone();
        cfg.train.hidden = hidden;
        cfg.cw.n_chars = 0;
        cfg.cw.random_control = false;
        table.rows.push(run(format!("w{hidden}"), RowKind::Baseline { hidden }, cfg));
    }
    for p in points {
        table.rows.push(run(p.label(), RowKind::Point(p), p.apply(base)));
    }
    table
}

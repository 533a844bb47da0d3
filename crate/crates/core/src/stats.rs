//! Rank correlation against human ratings.
//!
//! Kendall's tau-b is computed with Knight's merge-sort algorithm in
//! O(n log n); Spearman's rho is the Pearson correlation of average ranks.
//! Both return `Ok(None)` when either input is constant.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in correlation input".into()));
    }
    Ok(())
}

/// Number of pairs within runs of equal values in an already sorted slice.
fn tied_pairs<T, F: Fn(&T, &T) -> bool>(sorted: &[T], eq: F) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` ascending and returns the number of exchanges an insertion
/// sort would perform, i.e. strictly inverted pairs.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b: `(C - D) / sqrt((C + D + T_x)(C + D + T_y))`.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    check_pair(xs, ys)?;
    let n = xs.len() as u64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = n * (n - 1) / 2;
    let tx = tied_pairs(&pairs, |a, b| a.0 == b.0);
    let txy = tied_pairs(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);

    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(y.len());
    let discordant = merge_count(&mut y, &mut buf);
    let ty = tied_pairs(&y, |a, b| a == b);

    if tx == n0 || ty == n0 {
        return Ok(None);
    }
    let numer = n0 as f64 - tx as f64 - ty as f64 + txy as f64 - 2.0 * discordant as f64;
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    Ok(Some((numer / denom).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end averaged.
        let r = (start + 1 + end) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    check_pair(xs, ys)?;
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Rescales to `[0, 1]`. A constant input maps to all 0.5 and the flag is set.
pub fn min_max_normalize(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite value in normalization input".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok((vec![0.5; values.len()], true));
    }
    Ok((values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false))
}

/// One (metric, human) observation with its grouping keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub metric: f64,
    pub human: f64,
    pub model: String,
    pub category: String,
}

/// Correlation for one group. `model == None` marks a mean row across
/// models; `category == None` a mean across categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model: Option<String>,
    pub category: Option<String>,
    pub n: usize,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub model: String,
    pub category: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub normalization: String,
    pub models: Vec<String>,
    pub categories: Vec<String>,
    pub groups: Vec<CorrelationReport>,
    /// Per model, averaged over its categories.
    pub model_means: Vec<CorrelationReport>,
    /// Per category, averaged over models.
    pub category_means: Vec<CorrelationReport>,
    pub grand_mean: CorrelationReport,
    pub skipped: Vec<SkippedGroup>,
}

fn mean_of(
    items: &[&CorrelationReport],
    model: Option<String>,
    category: Option<String>,
) -> CorrelationReport {
    let avg = |f: fn(&CorrelationReport) -> Option<f64>| {
        let vals: Vec<f64> = items.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let tau = avg(|r| r.tau);
    let rho = avg(|r| r.rho);
    CorrelationReport {
        model,
        category,
        n: items.iter().map(|r| r.n).sum(),
        degenerate: tau.is_none() || rho.is_none(),
        tau,
        rho,
    }
}

/// Mean rows over a set of per-(model, category) reports. Degenerate groups
/// are left out of the averages.
pub fn summarize(
    groups: &[CorrelationReport],
) -> (
    Vec<CorrelationReport>,
    Vec<CorrelationReport>,
    CorrelationReport,
) {
    let mut models: Vec<String> = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    for g in groups {
        if let Some(m) = &g.model {
            if !models.contains(m) {
                models.push(m.clone());
            }
        }
        if let Some(c) = &g.category {
            if !categories.contains(c) {
                categories.push(c.clone());
            }
        }
    }
    let model_means = models
        .iter()
        .map(|m| {
            let rows: Vec<_> = groups
                .iter()
                .filter(|g| g.model.as_ref() == Some(m))
                .collect();
            mean_of(&rows, Some(m.clone()), None)
        })
        .collect();
    let category_means = categories
        .iter()
        .map(|c| {
            let rows: Vec<_> = groups
                .iter()
                .filter(|g| g.category.as_ref() == Some(c))
                .collect();
            mean_of(&rows, None, Some(c.clone()))
        })
        .collect();
    let all: Vec<_> = groups.iter().collect();
    (model_means, category_means, mean_of(&all, None, None))
}

/// Groups samples by (model, category), min-max normalizes both score
/// vectors within each group and computes tau-b and rho. Groups with fewer
/// than two samples are skipped.
pub fn correlation_report(samples: &[Sample]) -> Result<CorrelationTable> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut buckets: HashMap<(String, String), (Vec<f64>, Vec<f64>)> = HashMap::new();
    for s in samples {
        let key = (s.model.clone(), s.category.clone());
        let entry = buckets.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        entry.0.push(s.metric);
        entry.1.push(s.human);
    }

    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    for key in &order {
        let (metric, human) = &buckets[key];
        if metric.len() < 2 {
            log::warn!(
                "skipping group ({}, {}): {} sample(s), need at least 2",
                key.0,
                key.1,
                metric.len()
            );
            skipped.push(SkippedGroup {
                model: key.0.clone(),
                category: key.1.clone(),
                n: metric.len(),
            });
            continue;
        }
        let (m, _) = min_max_normalize(metric)?;
        let (h, _) = min_max_normalize(human)?;
        let tau = kendall_tau(&m, &h)?;
        let rho = spearman_rho(&m, &h)?;
        groups.push(CorrelationReport {
            model: Some(key.0.clone()),
            category: Some(key.1.clone()),
            n: metric.len(),
            degenerate: tau.is_none() || rho.is_none(),
            tau,
            rho,
        });
    }

    let (model_means, category_means, grand_mean) = summarize(&groups);
    let mut models = Vec::new();
    let mut categories = Vec::new();
    for (m, c) in &order {
        if !models.contains(m) {
            models.push(m.clone());
        }
        if !categories.contains(c) {
            categories.push(c.clone());
        }
    }
    Ok(CorrelationTable {
        normalization: "min_max_per_group".into(),
        models,
        categories,
        groups,
        model_means,
        category_means,
        grand_mean,
        skipped,
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

impl CorrelationTable {
    fn group(&self, model: &str, category: &str) -> Option<&CorrelationReport> {
        self.groups
            .iter()
            .find(|g| g.model.as_deref() == Some(model) && g.category.as_deref() == Some(category))
    }

    /// Aligned text table: one row per model plus a `Mean` row; one tau/rho
    /// column pair per category plus an `all` pair holding the per-model
    /// mean across categories.
    pub fn render_text(&self) -> String {
        let mut header = vec!["model".to_string()];
        let mut sub = vec![String::new()];
        for c in self.categories.iter().map(String::as_str).chain(["all"]) {
            header.push(c.to_string());
            header.push(String::new());
            sub.push("tau".into());
            sub.push("rho".into());
        }
        let mut rows = vec![header, sub];
        for m in &self.models {
            let mut row = vec![m.clone()];
            for c in &self.categories {
                let g = self.group(m, c);
                row.push(cell(g.and_then(|g| g.tau)));
                row.push(cell(g.and_then(|g| g.rho)));
            }
            let mm = self
                .model_means
                .iter()
                .find(|r| r.model.as_deref() == Some(m));
            row.push(cell(mm.and_then(|r| r.tau)));
            row.push(cell(mm.and_then(|r| r.rho)));
            rows.push(row);
        }
        let mut mean_row = vec!["Mean".to_string()];
        for c in &self.categories {
            let cm = self
                .category_means
                .iter()
                .find(|r| r.category.as_deref() == Some(c));
            mean_row.push(cell(cm.and_then(|r| r.tau)));
            mean_row.push(cell(cm.and_then(|r| r.rho)));
        }
        mean_row.push(cell(self.grand_mean.tau));
        mean_row.push(cell(self.grand_mean.rho));
        rows.push(mean_row);

        let ncols = rows[0].len();
        let widths: Vec<usize> = (0..ncols)
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if j == 0 {
                        format!("{s:<w$}", w = widths[j])
                    } else {
                        format!("{s:>w$}", w = widths[j])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 1 || i == rows.len() - 2 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (ncols - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

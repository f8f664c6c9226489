//! Metrics and report exports.

use std::fmt;
use std::fmt::Write as _;

use crate::data::UserId;
use crate::numkit::clamped_logloss;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    User(UserId),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::User(u) => write!(f, "user:{u}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scope: Scope,
    /// `None` when the scope holds a single class.
    pub auc: Option<f64>,
    pub mean_logloss: f64,
    pub n_samples: usize,
    pub n_pos: usize,
}

impl EvalRecord {
    pub fn compute(scope: Scope, probs: &[f64], labels: &[u8]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let auc = auc(probs, labels)?;
        let mut total = 0.0;
        for (&p, &y) in probs.iter().zip(labels) {
            total += clamped_logloss(p, y)?;
        }
        Ok(EvalRecord {
            scope,
            auc,
            mean_logloss: total / probs.len() as f64,
            n_samples: probs.len(),
            n_pos: labels.iter().filter(|&&y| y == 1).count(),
        })
    }
}

/// Rank-based AUC with average ranks for tied scores, i.e.
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`. `None` for single-class input.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(y as i64));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg * order[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)))
}

/// Relative AUC improvement over a base, in percent.
pub fn relaimpr(auc_measured: f64, auc_base: f64) -> Result<f64> {
    if auc_base.is_nan() || auc_base <= 0.5 {
        return Err(Error::InvalidArgument(format!("base AUC {auc_base} must exceed 0.5")));
    }
    Ok(((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Mean and population variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Per-user losses of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodLosses {
    pub method: String,
    pub losses: Vec<(UserId, f64)>,
}

pub const PER_USER_LOSS_HEADER: &str = "method,user_id,mean_logloss,variance";

/// One row per (method, user) followed by an `ALL` summary row per method
/// carrying the mean and population variance of that method's per-user losses.
pub fn per_user_loss_csv(methods: &[MethodLosses]) -> String {
    let mut out = String::from(PER_USER_LOSS_HEADER);
    out.push('\n');
    for m in methods {
        for (u, l) in &m.losses {
            let _ = writeln!(out, "{},{u},{l:.6},", m.method);
        }
    }
    for m in methods {
        let xs: Vec<f64> = m.losses.iter().map(|(_, l)| *l).collect();
        let (mean, var) = mean_and_variance(&xs);
        let _ = writeln!(out, "{},ALL,{mean:.6},{var:.8}", m.method);
    }
    out
}

/// How many users each model serves best.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proportions {
    pub counts: Vec<usize>,
}

impl Proportions {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Percentages in hundredths of a percent; largest-remainder rounding
    /// makes them sum to exactly 10000 when there is at least one user.
    pub fn basis_points(&self) -> Vec<u64> {
        let total = self.total() as u64;
        if total == 0 {
            return vec![0; self.counts.len()];
        }
        let exact: Vec<(u64, u64)> = self
            .counts
            .iter()
            .map(|&c| {
                let num = c as u64 * 10_000;
                (num / total, num % total)
            })
            .collect();
        let mut bp: Vec<u64> = exact.iter().map(|e| e.0).collect();
        let missing = 10_000 - bp.iter().sum::<u64>();
        let mut by_rem: Vec<usize> = (0..bp.len()).collect();
        by_rem.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
        for &i in by_rem.iter().take(missing as usize) {
            bp[i] += 1;
        }
        bp
    }

    pub fn percentages(&self) -> Vec<String> {
        self.basis_points()
            .iter()
            .map(|b| format!("{}.{:02}", b / 100, b % 100))
            .collect()
    }

    pub fn csv(&self, names: &[String]) -> String {
        let mut out = String::from("model,users,percent\n");
        for ((n, c), p) in names.iter().zip(&self.counts).zip(self.percentages()) {
            let _ = writeln!(out, "{n},{c},{p}");
        }
        out
    }
}

/// Index of the smallest loss, ties to the lowest index.
pub fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (k, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = k;
        }
    }
    best
}

/// `per_user[u][k]` = mean loss of model `k` on user `u`.
pub fn best_model_proportions(per_user: &[Vec<f64>], k: usize) -> Result<Proportions> {
    let mut counts = vec![0; k];
    for row in per_user {
        if row.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                found: row.len(),
            });
        }
        counts[argmin(row)] += 1;
    }
    Ok(Proportions { counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub auc: Option<f64>,
    pub logloss: f64,
    /// Single base model; the best of these is the RelaImpr reference.
    pub single: bool,
}

pub const REPORT_HEADER: &str = "method,auc,logloss,relaimpr";

fn fmt_auc(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_string(), |a| format!("{a:.4}"))
}

/// Report CSV. AUC and LogLoss are printed to four decimals and RelaImpr is
/// computed from the printed AUCs against the best printed single-model AUC,
/// so every row can be re-derived from the file alone.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let printed = |r: &ReportRow| -> Option<f64> { r.auc.map(|a| fmt_auc(Some(a)).parse().unwrap()) };
    let base = rows
        .iter()
        .filter(|r| r.single)
        .filter_map(printed)
        .fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |b| b.max(a))));
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let ri = match (printed(r), base) {
            (Some(a), Some(b)) if b > 0.5 => format!("{:.2}%", relaimpr(a, b)?),
            _ => "NA".to_string(),
        };
        let _ = writeln!(out, "{},{},{:.4},{ri}", r.method, fmt_auc(r.auc), r.logloss);
    }
    check_report(&out)?;
    Ok(out)
}

/// Re-derive each row's RelaImpr from the AUC column and compare to the
/// printed value. The reference is the largest AUC among rows whose RelaImpr
/// prints as exactly `0.00%` and equals it.
pub fn check_report(csv: &str) -> Result<()> {
    let rows: Vec<(Option<f64>, Option<f64>)> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.rsplitn(4, ',').collect();
            let ri = cols[0].strip_suffix('%').and_then(|v| v.parse().ok());
            let auc = cols[2].parse().ok();
            (auc, ri)
        })
        .collect();
    let bases: Vec<f64> = rows
        .iter()
        .filter_map(|&(a, r)| match (a, r) {
            (Some(a), Some(0.0)) => Some(a),
            _ => None,
        })
        .collect();
    for &(a, r) in &rows {
        if let (Some(a), Some(r)) = (a, r) {
            let ok = bases
                .iter()
                .any(|&b| (relaimpr(a, b).unwrap_or(f64::NAN) - r).abs() <= 0.005 + 1e-9);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "report RelaImpr {r}% inconsistent with AUC {a}"
                )));
            }
        }
    }
    Ok(())
}

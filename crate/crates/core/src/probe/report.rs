use serde::{Deserialize, Serialize};

use crate::envsim::Category;
use crate::{Error, Result};

/// How per-variable F1 is averaged; recorded in every report.
pub const F1_AVERAGING: &str = "macro over classes present in the test labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub name: String,
    pub category: Category,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub accuracy: f64,
    pub f1: f64,
    pub variables: usize,
}

/// Probe results for one (condition, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub seed: u64,
    pub fingerprint: String,
    pub f1_averaging: String,
    pub variables: Vec<VariableScore>,
    /// Only categories with at least one retained variable, in canonical order.
    pub categories: Vec<CategoryScore>,
    /// Mean over categories, not over variables.
    pub mean_accuracy: f64,
    pub mean_f1: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl ConditionReport {
    pub fn new(condition: &str, seed: u64, fingerprint: &str, variables: Vec<VariableScore>) -> Self {
        let categories: Vec<CategoryScore> = Category::ALL
            .into_iter()
            .filter_map(|c| {
                let members: Vec<&VariableScore> = variables.iter().filter(|v| v.category == c).collect();
                (!members.is_empty()).then(|| CategoryScore {
                    category: c,
                    accuracy: mean(members.iter().map(|v| v.accuracy)),
                    f1: mean(members.iter().map(|v| v.f1)),
                    variables: members.len(),
                })
            })
            .collect();
        ConditionReport {
            condition: condition.to_string(),
            seed,
            fingerprint: fingerprint.to_string(),
            f1_averaging: F1_AVERAGING.to_string(),
            mean_accuracy: mean(categories.iter().map(|c| c.accuracy)),
            mean_f1: mean(categories.iter().map(|c| c.f1)),
            variables,
            categories,
        }
    }

    /// Same scores under a different label.
    pub fn tagged(mut self, condition: &str, seed: u64, fingerprint: &str) -> Self {
        self.condition = condition.to_string();
        self.seed = seed;
        self.fingerprint = fingerprint.to_string();
        self
    }

    pub fn category(&self, category: Category) -> Option<&CategoryScore> {
        self.categories.iter().find(|c| c.category == category)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad report JSON: {e}")))
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.variables
            .iter()
            .map(|v| ReportRow {
                condition: self.condition.clone(),
                variable: v.name.clone(),
                category: v.category,
                accuracy: v.accuracy,
                f1: v.f1,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        ReportRow::to_csv(&self.rows())
    }
}

/// One CSV line: `condition,variable,category,accuracy,f1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub variable: String,
    pub category: Category,
    pub accuracy: f64,
    pub f1: f64,
}

impl ReportRow {
    pub const HEADER: &'static str = "condition,variable,category,accuracy,f1";

    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(rows: &[ReportRow]) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.condition,
                r.variable,
                r.category.key(),
                r.accuracy,
                r.f1
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::config(format!("report CSV must start with `{}`", Self::HEADER)));
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let bad = |what: &str| Error::config(format!("report CSV line {}: {what}", i + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad("expected 5 fields"));
                }
                Ok(ReportRow {
                    condition: f[0].to_string(),
                    variable: f[1].to_string(),
                    category: Category::from_key(f[2]).ok_or_else(|| bad("unknown category"))?,
                    accuracy: f[3].parse().map_err(|_| bad("accuracy is not a number"))?,
                    f1: f[4].parse().map_err(|_| bad("f1 is not a number"))?,
                })
            })
            .collect()
    }
}

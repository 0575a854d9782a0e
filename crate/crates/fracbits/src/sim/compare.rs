//! Cross-model comparison: reductions against the 8-bit baseline and Pareto
//! dominance flags on the (memory, accuracy) plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub label: String,
    pub memory_bytes: u64,
    pub accuracy: f64,
    pub latency_s: Option<f64>,
    pub energy_j: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub memory_bytes: u64,
    pub accuracy: f64,
    pub latency_s: Option<f64>,
    pub energy_j: Option<f64>,
    pub mem_reduction_pct: f64,
    pub latency_reduction_pct: Option<f64>,
    pub energy_reduction_pct: Option<f64>,
    /// Some other point is no worse on memory and accuracy, strictly better
    /// on at least one.
    pub dominated: bool,
}

fn reduction_pct(baseline: f64, value: f64) -> f64 {
    (1.0 - value / baseline) * 100.0
}

/// Build the comparison table. `baseline` names the reference point (the
/// 8-bit model); reductions are relative to it.
pub fn compare_models(points: &[ModelPoint], baseline: &str) -> Result<Vec<CompareRow>> {
    if points.len() < 2 {
        return Err(Error::InsufficientData {
            what: "model points to compare",
            needed: 2,
            available: points.len(),
        });
    }
    let base = points
        .iter()
        .find(|p| p.label == baseline)
        .ok_or_else(|| Error::InvalidConfig {
            field: "baseline".into(),
            detail: format!("no point labelled '{baseline}'"),
        })?
        .clone();

    let rows = points
        .iter()
        .map(|p| {
            let dominated = points.iter().any(|other| {
                !std::ptr::eq(other, p)
                    && other.memory_bytes <= p.memory_bytes
                    && other.accuracy >= p.accuracy
                    && (other.memory_bytes < p.memory_bytes || other.accuracy > p.accuracy)
            });
            CompareRow {
                label: p.label.clone(),
                memory_bytes: p.memory_bytes,
                accuracy: p.accuracy,
                latency_s: p.latency_s,
                energy_j: p.energy_j,
                mem_reduction_pct: reduction_pct(base.memory_bytes as f64, p.memory_bytes as f64),
                latency_reduction_pct: match (base.latency_s, p.latency_s) {
                    (Some(b), Some(v)) => Some(reduction_pct(b, v)),
                    _ => None,
                },
                energy_reduction_pct: match (base.energy_j, p.energy_j) {
                    (Some(b), Some(v)) => Some(reduction_pct(b, v)),
                    _ => None,
                },
                dominated,
            }
        })
        .collect();
    Ok(rows)
}

pub fn comparison_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "label,memory_bytes,accuracy,latency_us,energy_uj,mem_reduction_pct,\
         latency_reduction_pct,energy_reduction_pct,dominated\n",
    );
    for r in rows {
        let fmt_opt = |v: Option<f64>, scale: f64| match v {
            Some(x) => format!("{:.4}", x * scale),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{:.4},{},{},{:.2},{},{},{}\n",
            r.label,
            r.memory_bytes,
            r.accuracy,
            fmt_opt(r.latency_s, 1e6),
            fmt_opt(r.energy_j, 1e6),
            r.mem_reduction_pct,
            fmt_opt(r.latency_reduction_pct, 1.0),
            fmt_opt(r.energy_reduction_pct, 1.0),
            r.dominated,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(label: &str, mem: u64, acc: f64) -> ModelPoint {
        ModelPoint {
            label: label.into(),
            memory_bytes: mem,
            accuracy: acc,
            latency_s: None,
            energy_j: None,
        }
    }

    #[test]
    fn baseline_against_itself_is_zero_reduction() {
        let pts = vec![point("w8", 1000, 0.9), point("w4", 500, 0.88)];
        let rows = compare_models(&pts, "w8").unwrap();
        assert_eq!(rows[0].mem_reduction_pct, 0.0);
        assert!((rows[1].mem_reduction_pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn headline_reduction_arithmetic() {
        // 912 -> 422 is a 54% reduction; 912 -> 691 is 24%.
        let pts = vec![
            point("w8", 912, 0.9),
            point("searched", 422, 0.9),
            point("w6", 691, 0.9),
        ];
        let rows = compare_models(&pts, "w8").unwrap();
        assert!((rows[1].mem_reduction_pct - 54.0).abs() <= 0.5);
        assert!((rows[2].mem_reduction_pct - 24.0).abs() <= 0.5);
    }

    #[test]
    fn dominance_flags() {
        // b is dominated by a (same accuracy, more memory); c trades off.
        let pts = vec![
            point("a", 400, 0.92),
            point("b", 500, 0.92),
            point("c", 300, 0.80),
        ];
        let rows = compare_models(&pts, "a").unwrap();
        assert!(!rows[0].dominated);
        assert!(rows[1].dominated);
        assert!(!rows[2].dominated);
    }

    #[test]
    fn fewer_than_two_points_is_refused() {
        let pts = vec![point("only", 100, 0.5)];
        assert!(matches!(
            compare_models(&pts, "only"),
            Err(Error::InsufficientData { .. })
        ));
    }
}

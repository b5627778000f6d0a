use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

use super::Metric;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub metric: Metric,
    pub value: f64,
    pub higher_is_better: bool,
}

/// Per-task metric values, in task order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub tasks: Vec<(String, MetricEntry)>,
    pub delta_m: Option<f64>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task: impl Into<String>, metric: Metric, value: f64) {
        self.tasks.push((
            task.into(),
            MetricEntry {
                metric,
                value,
                higher_is_better: metric.higher_is_better(),
            },
        ));
    }

    pub fn get(&self, task: &str) -> Option<&MetricEntry> {
        self.tasks.iter().find(|(n, _)| n == task).map(|(_, e)| e)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (name, e) in &self.tasks {
            m.insert(
                name.clone(),
                json!({ "metric": e.metric.as_str(), "value": e.value, "higher_is_better": e.higher_is_better }),
            );
        }
        if let Some(d) = self.delta_m {
            m.insert("delta_m".into(), json!(d));
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Format("metric report must be a JSON object".into()))?;
        let mut report = MetricReport::new();
        for (name, entry) in obj {
            if name == "delta_m" {
                report.delta_m = Some(entry.as_f64().ok_or_else(|| Error::Format("delta_m must be a number".into()))?);
                continue;
            }
            let field = |k: &str| entry.get(k).ok_or_else(|| Error::Format(format!("task '{name}' lacks '{k}'")));
            let metric: Metric = field("metric")?
                .as_str()
                .ok_or_else(|| Error::Format(format!("task '{name}': metric must be a string")))?
                .parse()?;
            let value = field("value")?
                .as_f64()
                .ok_or_else(|| Error::Format(format!("task '{name}': value must be a number")))?;
            let higher_is_better = field("higher_is_better")?
                .as_bool()
                .ok_or_else(|| Error::Format(format!("task '{name}': higher_is_better must be a bool")))?;
            report.tasks.push((
                name.clone(),
                MetricEntry {
                    metric,
                    value,
                    higher_is_better,
                },
            ));
        }
        Ok(report)
    }
}

/// Average relative gain over a single-task baseline, in percent:
/// `100/T · Σ_t (−1)^{l_t} (M_t − S_t) / S_t` with `l_t = 1` for lower-is-better metrics.
pub fn delta_m(current: &MetricReport, baseline: &MetricReport) -> Result<f64> {
    if current.tasks.is_empty() || current.tasks.len() != baseline.tasks.len() {
        return Err(Error::Data(format!(
            "delta_m needs identical task sets ({} vs {} tasks)",
            current.tasks.len(),
            baseline.tasks.len()
        )));
    }
    let mut sum = 0.0;
    for (name, cur) in &current.tasks {
        let base = baseline
            .get(name)
            .ok_or_else(|| Error::Data(format!("baseline has no task '{name}'")))?;
        if base.metric != cur.metric || base.higher_is_better != cur.higher_is_better {
            return Err(Error::Data(format!("task '{name}' uses different metrics in the two reports")));
        }
        if base.value == 0.0 {
            return Err(Error::Data(format!("baseline value for '{name}' is zero")));
        }
        let rel = (cur.value - base.value) / base.value;
        sum += if cur.higher_is_better { rel } else { -rel };
    }
    Ok(100.0 * sum / current.tasks.len() as f64)
}

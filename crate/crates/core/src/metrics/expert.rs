//! Aggregation of expert grading sheets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRADES: [&str; 6] = ["X", "B2", "B1", "C", "A2", "A1"];

/// One graded report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertScore {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub sample_id: String,
    pub rubric: String,
    /// -1 too concise, 0 good, +1 too verbose.
    pub brevity: i8,
    pub accuracy: u8,
    pub danger: u8,
}

impl ExpertScore {
    pub fn validate(&self) -> Result<()> {
        crate::model::check_schema(self.schema_version)?;
        if !GRADES.contains(&self.rubric.as_str()) {
            return Err(Error::UnknownGrade(self.rubric.clone()));
        }
        let checks: [(&'static str, bool, f64, &'static str); 3] = [
            ("brevity", (-1..=1).contains(&self.brevity), self.brevity as f64, "-1, 0 or 1"),
            ("accuracy", (1..=5).contains(&self.accuracy), self.accuracy as f64, "1..=5"),
            ("danger", self.danger <= 1, self.danger as f64, "0 or 1"),
        ];
        for (what, ok, value, expected) in checks {
            if !ok {
                return Err(Error::OutOfRange { what, value, expected });
            }
        }
        Ok(())
    }
}

/// Numeric value of each rubric grade. The default is a guess; the source
/// grading scheme only says the grades map onto 1-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricMap(pub BTreeMap<String, f64>);

impl Default for RubricMap {
    fn default() -> Self {
        Self(
            GRADES
                .iter()
                .zip([1.0, 2.0, 3.0, 3.0, 4.0, 5.0])
                .map(|(g, v)| (g.to_string(), v))
                .collect(),
        )
    }
}

impl RubricMap {
    pub fn validate(&self) -> Result<()> {
        for g in GRADES {
            let v = *self
                .0
                .get(g)
                .ok_or_else(|| Error::Config(format!("rubric map lacks grade {g}")))?;
            if !(1.0..=5.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "rubric value",
                    value: v,
                    expected: "[1, 5]",
                });
            }
        }
        if let Some(extra) = self.0.keys().find(|k| !GRADES.contains(&k.as_str())) {
            return Err(Error::UnknownGrade(extra.clone()));
        }
        Ok(())
    }

    pub fn value(&self, grade: &str) -> Result<f64> {
        self.0
            .get(grade)
            .copied()
            .ok_or_else(|| Error::UnknownGrade(grade.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertAggregate {
    pub samples: usize,
    pub rubric_mean: f64,
    pub brevity_mean: f64,
    /// `|brevity_mean|`
    pub brevity_abs_of_mean: f64,
    /// Mean of `|brevity|`, i.e. the share of reports not graded "good".
    pub brevity_mean_abs: f64,
    pub accuracy_mean: f64,
    pub danger_rate: f64,
}

pub fn aggregate_expert_scores(scores: &[ExpertScore], map: &RubricMap) -> Result<ExpertAggregate> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("expert scores"));
    }
    map.validate()?;
    let n = scores.len() as f64;
    let (mut rubric, mut brev, mut brev_abs, mut acc, mut danger) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in scores {
        s.validate()?;
        rubric += map.value(&s.rubric)?;
        brev += f64::from(s.brevity);
        brev_abs += f64::from(s.brevity.abs());
        acc += f64::from(s.accuracy);
        danger += f64::from(s.danger);
    }
    Ok(ExpertAggregate {
        samples: scores.len(),
        rubric_mean: rubric / n,
        brevity_mean: brev / n,
        brevity_abs_of_mean: (brev / n).abs(),
        brevity_mean_abs: brev_abs / n,
        accuracy_mean: acc / n,
        danger_rate: danger / n,
    })
}

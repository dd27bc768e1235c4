use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PolicyRecord, PolicyType, Portfolio, RiskLevel};
use crate::error::{Error, Result};

/// Column names for each record field. `tenure` is optional; when its column
/// is absent every record gets tenure 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub id: String,
    pub churn: String,
    pub rate_change: String,
    pub expenses: String,
    pub competitiveness: String,
    pub premium_old: String,
    pub premium_new_base: String,
    pub undershooting_1: String,
    pub undershooting_2: String,
    pub risk_level: String,
    pub policy_type: String,
    pub tenure: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            churn: "churn".into(),
            rate_change: "rate_change".into(),
            expenses: "expenses".into(),
            competitiveness: "competitiveness".into(),
            premium_old: "premium_old".into(),
            premium_new_base: "premium_new_base".into(),
            undershooting_1: "undershooting_1".into(),
            undershooting_2: "undershooting_2".into(),
            risk_level: "risk_level".into(),
            policy_type: "policy_type".into(),
            tenure: "tenure".into(),
        }
    }
}

impl CsvSchema {
    fn required(&self) -> [&str; 11] {
        [
            &self.id,
            &self.churn,
            &self.rate_change,
            &self.expenses,
            &self.competitiveness,
            &self.premium_old,
            &self.premium_new_base,
            &self.undershooting_1,
            &self.undershooting_2,
            &self.risk_level,
            &self.policy_type,
        ]
    }
}

/// Reads a portfolio. Rows are numbered from 1, excluding the header.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Portfolio> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let pos: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let mut cols = Vec::with_capacity(11);
    for name in schema.required() {
        cols.push(*pos.get(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?);
    }
    let tenure_col = pos.get(schema.tenure.as_str()).copied();

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let err = |message: String| Error::Row { row: row_no, message };
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c);
            let v: f64 = s
                .parse()
                .map_err(|_| err(format!("{name}: cannot parse `{s}` as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("{name}: value `{s}` is not finite")))
            }
        };
        let id: u64 = field(cols[0])
            .parse()
            .map_err(|_| err(format!("id: cannot parse `{}`", field(cols[0]))))?;
        let churn = match field(cols[1]) {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("churn must be 0 or 1, got `{other}`"))),
        };
        let risk_level = RiskLevel::from_str(field(cols[9])).map_err(err)?;
        let policy_type = PolicyType::from_str(field(cols[10])).map_err(err)?;
        let tenure = match tenure_col {
            Some(c) => field(c)
                .parse()
                .map_err(|_| err(format!("tenure: cannot parse `{}`", field(c))))?,
            None => 1,
        };
        records.push(PolicyRecord {
            id,
            churn,
            rate_change: num(cols[2], "rate_change")?,
            expenses: num(cols[3], "expenses")?,
            competitiveness: num(cols[4], "competitiveness")?,
            premium_old: num(cols[5], "premium_old")?,
            premium_new_base: num(cols[6], "premium_new_base")?,
            undershooting_1: num(cols[7], "undershooting_1")?,
            undershooting_2: num(cols[8], "undershooting_2")?,
            risk_level,
            policy_type,
            tenure,
        });
    }
    Portfolio::new(records)
}

/// Writes a portfolio with the default schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_csv(path: impl AsRef<Path>, portfolio: &Portfolio) -> Result<()> {
    let s = CsvSchema::default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = s.required().to_vec();
    header.push(&s.tenure);
    w.write_record(&header)?;
    for r in portfolio.records() {
        w.write_record([
            r.id.to_string(),
            (r.churn as u8).to_string(),
            r.rate_change.to_string(),
            r.expenses.to_string(),
            r.competitiveness.to_string(),
            r.premium_old.to_string(),
            r.premium_new_base.to_string(),
            r.undershooting_1.to_string(),
            r.undershooting_2.to_string(),
            r.risk_level.label().to_string(),
            r.policy_type.label().to_string(),
            r.tenure.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

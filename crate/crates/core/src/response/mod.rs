//! Outcome models: pooled LASSO-logistic response over imputations and
//! quadratic or boosted dose-response curves on the generalized propensity
//! score.

mod design;
mod dose;
mod lasso;
mod linalg;
mod pooled;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use design::DesignSpec;
pub use dose::{
    avg_dose_response, avg_dose_response_curve, bootstrap_dr, fit_boosted_dr, fit_boosted_dr_on, fit_quadratic_dr,
    fit_quadratic_dr_portfolio, individual_response, resample_portfolio, BoostedDr, BoostedDrConfig, BootstrapBands,
    BootstrapConfig, DoseModel, QuadraticDr, QUADRATIC_TERMS,
};
pub use lasso::{
    fit_logistic_lasso, fit_logistic_penalized, group_folds, penalty_grid, LassoConfig, LassoPath, LogisticFit,
};
pub use pooled::{
    churn_surface, fit_pooled_response, select_penalty, surface_tsv, PooledLogistic, SurfacePoint, INTERCEPT,
};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseModel {
    PooledLogistic(PooledLogistic),
    QuadraticDr(QuadraticDr),
    BoostedDr(BoostedDr),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: ResponseModel,
}

impl ResponseModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            format_version: FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported response model version {}",
                f.format_version
            )));
        }
        Ok(f.model)
    }
}

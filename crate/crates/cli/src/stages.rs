use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use serde::de::DeserializeOwned;
use serde::Serialize;

use renewal_core::boosting::{BoostConfig, Ensemble};
use renewal_core::matching::{impute, ImputedResponseSet};
use renewal_core::optimizer::{
    boundary_on, default_caps, frontier_on, multiperiod, realized_outcome, ActionSet, ChoiceTable, ChurnResponse,
    CompetitivenessUpdate, CompetitorsFixed, DoseResponse, FrontierEntry, FrozenCompetitiveness, RenewalPlan,
};
use renewal_core::portfolio::{
    load_csv, quantile_grid, save_csv, synth_generate, trim_outliers, write_sidecar, CsvSchema, Portfolio,
    TreatmentGrid,
};
use renewal_core::propensity::{
    asam, convergence_study, fit_continuous_gps, fit_continuous_gps_on, fit_discrete_ps, fit_discrete_ps_on,
    PropensityModel, PsConfig,
};
use renewal_core::response::{
    avg_dose_response_curve, bootstrap_dr, churn_surface, fit_boosted_dr, fit_boosted_dr_on, fit_pooled_response,
    fit_quadratic_dr_portfolio, select_penalty, surface_tsv, BoostedDr, DesignSpec, QuadraticDr, ResponseModel,
};

use crate::config::{DoseModelKind, Feedback, RunConfig, TreatmentKind};
use crate::manifest::{hash_all, manifest_path, Manifest, VERSION};
use crate::tune::{tune, FoldScore, TuneReport};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Generate a synthetic portfolio with known ground truth.
    Simulate,
    /// Drop rate-change and competitiveness outliers.
    Trim,
    /// Quantile treatment grid.
    Grid,
    /// Fit the (generalized) propensity model.
    FitPs,
    /// Covariate balance before and after weighting.
    Balance,
    /// Discrete versus continuous scores over interval counts.
    Converge,
    /// Impute counterfactual responses by score matching.
    Match,
    /// Pooled LASSO-logistic response model.
    FitResponse,
    /// Quadratic and boosted dose-response models.
    DoseResponse,
    /// Profit-churn efficient frontier.
    Frontier,
    /// Plans that dominate the observed one.
    Boundary,
    /// Multi-period renewal plan.
    Multiperiod,
    /// Cross-validated propensity hyperparameters.
    TunePs,
    /// Cross-validated dose-response hyperparameters.
    TuneResponse,
    /// All modelling stages in order.
    Pipeline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Trim => "trim",
            Stage::Grid => "grid",
            Stage::FitPs => "fit-ps",
            Stage::Balance => "balance",
            Stage::Converge => "converge",
            Stage::Match => "match",
            Stage::FitResponse => "fit-response",
            Stage::DoseResponse => "dose-response",
            Stage::Frontier => "frontier",
            Stage::Boundary => "boundary",
            Stage::Multiperiod => "multiperiod",
            Stage::TunePs => "tune-ps",
            Stage::TuneResponse => "tune-response",
            Stage::Pipeline => "pipeline",
        }
    }

    /// Stages `pipeline` runs for a treatment kind.
    pub fn pipeline(kind: TreatmentKind, simulate: bool, studies: bool) -> Vec<Stage> {
        let mut v = Vec::new();
        if simulate {
            v.push(Stage::Simulate);
        }
        v.extend([Stage::Trim, Stage::Grid, Stage::FitPs, Stage::Balance]);
        match kind {
            TreatmentKind::Discrete => v.extend([Stage::Match, Stage::FitResponse]),
            TreatmentKind::Continuous => v.push(Stage::DoseResponse),
        }
        v.extend([Stage::Frontier, Stage::Boundary, Stage::Multiperiod]);
        if studies {
            v.extend([Stage::Converge, Stage::TunePs]);
            if kind == TreatmentKind::Continuous {
                v.push(Stage::TuneResponse);
            }
        }
        v
    }
}

pub struct Runner {
    cfg: RunConfig,
    cfg_json: serde_json::Value,
    out: PathBuf,
    check: bool,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))? + "\n";
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn ensemble(ps: &PropensityModel) -> &Ensemble {
    match ps {
        PropensityModel::Discrete(d) => &d.ensemble,
        PropensityModel::Continuous(c) => &c.ensemble,
    }
}

#[derive(Serialize)]
struct FrontierRow {
    alpha: f64,
    status: &'static str,
    expected_profit: Option<f64>,
    expected_churn: f64,
    dual_gap: Option<f64>,
    multiplier: Option<f64>,
}

impl FrontierRow {
    fn of(e: &FrontierEntry) -> Self {
        match e {
            FrontierEntry::Solved(p) => FrontierRow {
                alpha: p.alpha,
                status: "solved",
                expected_profit: Some(p.expected_profit),
                expected_churn: p.expected_churn,
                dual_gap: Some(p.dual_gap),
                multiplier: Some(p.multiplier),
            },
            FrontierEntry::Infeasible { alpha, min_churn } => FrontierRow {
                alpha: *alpha,
                status: "infeasible",
                expected_profit: None,
                expected_churn: *min_churn,
                dual_gap: None,
                multiplier: None,
            },
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Plan summary without the per-policy rates, which go to a TSV.
#[derive(Serialize)]
struct PlanSummary<'a> {
    policies: usize,
    tau: usize,
    caps: &'a [f64],
    years: &'a [renewal_core::optimizer::YearOutcome],
    objective: f64,
    dual_bound: f64,
    dual_gap: f64,
    multipliers: &'a [f64],
    iterations: usize,
    converged: bool,
    feedback: Feedback,
}

impl Runner {
    pub fn new(cfg: RunConfig, check: bool) -> Result<Self, CliError> {
        let out = cfg.paths.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        Ok(Runner {
            cfg_json: cfg.to_json(),
            cfg,
            out,
            check,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn raw_input(&self) -> PathBuf {
        self.cfg
            .paths
            .input
            .clone()
            .unwrap_or_else(|| self.path("portfolio.csv"))
    }

    pub fn run(&self, stage: Stage) -> Result<(), CliError> {
        if stage == Stage::Pipeline {
            let simulate = self.cfg.paths.input.is_none();
            for s in Stage::pipeline(self.cfg.kind, simulate, self.cfg.pipeline.studies) {
                self.run(s)?;
            }
            return Ok(());
        }
        let (inputs, outputs) = self.artifacts(stage);
        for p in &inputs {
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "{}: missing input {}; run the upstream stage first",
                    stage.name(),
                    p.display()
                )));
            }
        }
        let mpath = manifest_path(&self.out, stage.name());
        if self.check {
            if let Some(m) = Manifest::read(&mpath) {
                if m.is_current(&self.cfg_json, &inputs, &outputs) {
                    log::info!("{}: up to date", stage.name());
                    return Ok(());
                }
            }
        }
        log::info!("{}: running", stage.name());
        let input_hashes = hash_all(&inputs)?;
        self.body(stage)?;
        Manifest {
            stage: stage.name().to_string(),
            version: VERSION.to_string(),
            seed: self.cfg.seed,
            config: self.cfg_json.clone(),
            inputs: input_hashes,
            outputs: hash_all(&outputs)?,
        }
        .write(&mpath)
    }

    /// Inputs and outputs of a stage, in a fixed order.
    pub fn artifacts(&self, stage: Stage) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let p = |names: &[&str]| names.iter().map(|n| self.path(n)).collect::<Vec<_>>();
        let model_inputs = || match (self.cfg.kind, self.cfg.response.optimizer_model) {
            (TreatmentKind::Discrete, _) => p(&["trimmed.csv", "grid.json", "response.json"]),
            (TreatmentKind::Continuous, DoseModelKind::Boosted) => {
                p(&["trimmed.csv", "grid.json", "ps.json", "dr_boosted.json"])
            }
            (TreatmentKind::Continuous, DoseModelKind::Quadratic) => {
                p(&["trimmed.csv", "grid.json", "ps.json", "dr_quadratic.json"])
            }
        };
        match stage {
            Stage::Simulate => (vec![], p(&["portfolio.csv", "portfolio.meta.json"])),
            Stage::Trim => (vec![self.raw_input()], p(&["trimmed.csv", "trim.json"])),
            Stage::Grid => (p(&["trimmed.csv"]), p(&["grid.json", "grid.tsv"])),
            Stage::FitPs => (p(&["trimmed.csv", "grid.json"]), p(&["ps.json"])),
            Stage::Balance => (
                p(&["trimmed.csv", "grid.json", "ps.json"]),
                p(&["balance.tsv", "balance.json"]),
            ),
            Stage::Converge => (p(&["trimmed.csv"]), p(&["converge.tsv", "converge.json"])),
            Stage::Match => (p(&["trimmed.csv", "grid.json", "ps.json"]), p(&["imputed.bin"])),
            Stage::FitResponse => (
                p(&["trimmed.csv", "grid.json", "imputed.bin"]),
                p(&["lasso_path.tsv", "response.json", "coefficients.tsv", "surface.tsv"]),
            ),
            Stage::DoseResponse => (
                p(&["trimmed.csv", "ps.json"]),
                p(&["dr_quadratic.json", "dr_boosted.json", "dr_curve.tsv", "dr_bands.tsv"]),
            ),
            Stage::Frontier => (
                model_inputs(),
                p(&["frontier.tsv", "frontier.json", "frontier_plans.tsv"]),
            ),
            Stage::Boundary => (model_inputs(), p(&["boundary.json", "boundary_plans.tsv"])),
            Stage::Multiperiod => (
                model_inputs(),
                p(&["multiperiod.json", "multiperiod.tsv", "multiperiod_plan.tsv"]),
            ),
            Stage::TunePs => (p(&["trimmed.csv", "grid.json"]), p(&["tune_ps.json", "tune_ps.tsv"])),
            Stage::TuneResponse => (
                p(&["trimmed.csv", "ps.json"]),
                p(&["tune_response.json", "tune_response.tsv"]),
            ),
            Stage::Pipeline => (vec![], vec![]),
        }
    }

    fn body(&self, stage: Stage) -> Result<(), CliError> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Trim => self.trim(),
            Stage::Grid => self.grid(),
            Stage::FitPs => self.fit_ps(),
            Stage::Balance => self.balance(),
            Stage::Converge => self.converge(),
            Stage::Match => self.matching(),
            Stage::FitResponse => self.fit_response(),
            Stage::DoseResponse => self.dose_response(),
            Stage::Frontier => self.frontier(),
            Stage::Boundary => self.boundary(),
            Stage::Multiperiod => self.multiperiod(),
            Stage::TunePs => self.tune_ps(),
            Stage::TuneResponse => self.tune_response(),
            Stage::Pipeline => unreachable!("expanded in run"),
        }
    }

    fn trimmed(&self) -> Result<Portfolio, CliError> {
        Ok(load_csv(self.path("trimmed.csv"), &CsvSchema::default())?)
    }

    fn load_grid(&self) -> Result<TreatmentGrid, CliError> {
        read_json(&self.path("grid.json"))
    }

    fn load_ps(&self) -> Result<PropensityModel, CliError> {
        let path = self.path("ps.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(PropensityModel::from_json(&text)?)
    }

    fn load_response(&self, name: &str) -> Result<ResponseModel, CliError> {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(ResponseModel::from_json(&text)?)
    }

    /// PS settings with the run seed.
    fn ps_config(&self) -> PsConfig {
        let mut c = self.cfg.ps.clone();
        c.boost.seed = self.cfg.seed;
        c
    }

    fn require_continuous<'a>(&self, ps: &'a PropensityModel, stage: &str) -> Result<&'a PropensityModel, CliError> {
        match ps {
            PropensityModel::Continuous(_) => Ok(ps),
            PropensityModel::Discrete(_) => Err(CliError::Validation(format!(
                "{stage} needs a continuous propensity model; rerun fit-ps with kind = \"continuous\""
            ))),
        }
    }

    fn simulate(&self) -> Result<(), CliError> {
        let out = synth_generate(&self.cfg.synth, self.cfg.seed)?;
        save_csv(self.path("portfolio.csv"), &out.portfolio)?;
        write_sidecar(self.path("portfolio.meta.json"), &out.metadata)?;
        Ok(())
    }

    fn trim(&self) -> Result<(), CliError> {
        let input = self.raw_input();
        let schema = if self.cfg.paths.input.is_some() {
            self.cfg.paths.schema.clone()
        } else {
            CsvSchema::default()
        };
        let p = load_csv(&input, &schema)?;
        let (kept, report) = trim_outliers(&p)?;
        save_csv(self.path("trimmed.csv"), &kept)?;
        write_json(&self.path("trim.json"), &report)
    }

    fn grid(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let t = p.rate_changes();
        let grid = quantile_grid(&t, self.cfg.grid.intervals)?;
        let occ = grid.occupancy(&t);
        let b = grid.boundaries();
        let mut tsv = String::from("interval\tlabel\tlower\tupper\tmedian\tcount\n");
        for c in 0..grid.count() {
            let _ = writeln!(
                tsv,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                c + 1,
                grid.label(c),
                b[c],
                b[c + 1],
                grid.medians()[c],
                occ[c]
            );
        }
        write_json(&self.path("grid.json"), &grid)?;
        write_text(&self.path("grid.tsv"), &tsv)
    }

    fn fit_ps(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        let cfg = self.ps_config();
        let model = match self.cfg.kind {
            TreatmentKind::Discrete => fit_discrete_ps(&p, &grid, &cfg)?,
            TreatmentKind::Continuous => fit_continuous_gps(&p, &grid, grid.bounds(), &cfg)?,
        };
        let d = ensemble(&model).diagnostics();
        log::info!("fit-ps: kept {} of {} rounds", d.best_round, d.rounds_run);
        write_text(&self.path("ps.json"), &model.to_json()?)
    }

    fn balance(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        let report = asam(&p, &self.load_ps()?, &grid)?;
        log::info!(
            "balance: ASAM {:.4} before, {:.4} after weighting",
            report.overall_before,
            report.overall_after
        );
        write_text(&self.path("balance.tsv"), &report.to_tsv())?;
        write_json(&self.path("balance.json"), &report)
    }

    fn converge(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let cfg = self.ps_config();
        let rows = convergence_study(&p, &self.cfg.converge.intervals, &cfg, &cfg)?;
        let mut tsv = String::from(
            "intervals\tdiff_min\tdiff_q1\tdiff_median\tdiff_q3\tdiff_max\tdiff_mean\tdiscrete_asam_mean\tdiscrete_asam_median\tcontinuous_asam_mean\tcontinuous_asam_median\tdiscrete_rounds\n",
        );
        for r in &rows {
            let d = &r.score_diff;
            let _ = writeln!(
                tsv,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.intervals,
                d.min,
                d.q1,
                d.median,
                d.q3,
                d.max,
                d.mean,
                r.discrete_asam.mean,
                r.discrete_asam.median,
                r.continuous_asam.mean,
                r.continuous_asam.median,
                r.discrete_rounds
            );
        }
        write_text(&self.path("converge.tsv"), &tsv)?;
        write_json(&self.path("converge.json"), &rows)
    }

    fn matching(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        let m = &self.cfg.matching;
        let set = impute(&p, &self.load_ps()?, &grid, m.donors, m.imputations, self.cfg.seed)?;
        set.write_binary(self.path("imputed.bin"))?;
        Ok(())
    }

    fn fit_response(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        let imputed = ImputedResponseSet::read_binary(self.path("imputed.bin"))?;
        let design = DesignSpec::new(grid.count())?;
        let mut lasso = self.cfg.response.lasso.clone();
        lasso.seed = self.cfg.seed;
        let path = select_penalty(&p, &imputed, &design, &lasso)?;
        let penalty = path.selected_penalty();
        log::info!(
            "fit-response: one-SE penalty {penalty:.3e} (CV minimum at {:.3e})",
            path.min_penalty()
        );
        let model = fit_pooled_response(&p, &imputed, &design, &grid, penalty, &lasso)?;
        let surface = churn_surface(&model, &p, &self.cfg.response.surface_competitiveness);
        write_text(&self.path("lasso_path.tsv"), &path.to_tsv())?;
        write_text(&self.path("coefficients.tsv"), &model.coefficients_tsv())?;
        write_text(&self.path("surface.tsv"), &surface_tsv(&surface))?;
        write_text(
            &self.path("response.json"),
            &ResponseModel::PooledLogistic(model).to_json()?,
        )
    }

    fn doses(&self, ps: &PropensityModel) -> Vec<f64> {
        let PropensityModel::Continuous(c) = ps else {
            return Vec::new();
        };
        let (lo, hi) = (c.bounds.lower(), c.bounds.upper());
        let k = self.cfg.response.curve_points - 1;
        // The last point is pinned so rounding cannot leave the support.
        (0..=k)
            .map(|j| {
                if j == k {
                    hi
                } else {
                    lo + (hi - lo) * j as f64 / k as f64
                }
            })
            .collect()
    }

    fn dose_response(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let ps = self.load_ps()?;
        let ps = self.require_continuous(&ps, "dose-response")?;
        let grid = ps.grid().clone();
        let quad = fit_quadratic_dr_portfolio(&p, ps)?;
        let mut boosted_cfg = self.cfg.response.boosted.clone();
        boosted_cfg.boost.seed = self.cfg.seed;
        let boosted = fit_boosted_dr(&p, ps, &boosted_cfg)?;
        log::info!(
            "dose-response: boosted held-out log-loss {:.5} vs constant {:.5}",
            boosted.holdout_loss,
            boosted.baseline_loss
        );
        let doses = self.doses(ps);
        let qc = avg_dose_response_curve(&quad, &p, ps, &doses)?;
        let bc = avg_dose_response_curve(&boosted, &p, ps, &doses)?;
        let mut curve = String::from("t\tquadratic\tboosted\n");
        for k in 0..doses.len() {
            let _ = writeln!(curve, "{:.6}\t{:.8}\t{:.8}", doses[k], qc[k], bc[k]);
        }
        let ps_cfg = self.ps_config();
        let mut boot = self.cfg.response.bootstrap.clone();
        boot.seed = self.cfg.seed;
        let bands = bootstrap_dr(&p, &doses, &boot, |q| {
            let g = fit_continuous_gps(q, &grid, grid.bounds(), &ps_cfg)?;
            let m = fit_quadratic_dr_portfolio(q, &g)?;
            avg_dose_response_curve(&m, q, &g, &doses)
        })?;
        if bands.redraws > 0 {
            log::info!(
                "dose-response: {} bootstrap redraws for sparse intervals",
                bands.redraws
            );
        }
        write_text(
            &self.path("dr_quadratic.json"),
            &ResponseModel::QuadraticDr(quad).to_json()?,
        )?;
        write_text(
            &self.path("dr_boosted.json"),
            &ResponseModel::BoostedDr(boosted).to_json()?,
        )?;
        write_text(&self.path("dr_curve.tsv"), &curve)?;
        write_text(&self.path("dr_bands.tsv"), &bands.to_tsv())
    }

    /// Portfolio, action set and churn response of the optimizer stages.
    fn with_response<T>(
        &self,
        actions_step: f64,
        f: impl FnOnce(&Portfolio, &ActionSet, &dyn ChurnResponse) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        match self.cfg.kind {
            TreatmentKind::Discrete => {
                let ResponseModel::PooledLogistic(model) = self.load_response("response.json")? else {
                    return Err(CliError::Validation(
                        "response.json is not a pooled response model".into(),
                    ));
                };
                f(&p, &ActionSet::discrete(&grid), &model)
            }
            TreatmentKind::Continuous => {
                let ps = self.load_ps()?;
                let ps = self.require_continuous(&ps, "the continuous optimizer")?;
                let actions = ActionSet::continuous(grid.lower(), grid.upper(), actions_step)?;
                match self.cfg.response.optimizer_model {
                    DoseModelKind::Boosted => {
                        let ResponseModel::BoostedDr(m) = self.load_response("dr_boosted.json")? else {
                            return Err(CliError::Validation("dr_boosted.json is not a boosted model".into()));
                        };
                        f(&p, &actions, &DoseResponse::<BoostedDr>::new(&m, ps)?)
                    }
                    DoseModelKind::Quadratic => {
                        let ResponseModel::QuadraticDr(m) = self.load_response("dr_quadratic.json")? else {
                            return Err(CliError::Validation(
                                "dr_quadratic.json is not a quadratic model".into(),
                            ));
                        };
                        f(&p, &actions, &DoseResponse::<QuadraticDr>::new(&m, ps)?)
                    }
                }
            }
        }
    }

    fn frontier(&self) -> Result<(), CliError> {
        let alphas = &self.cfg.optimizer.alphas;
        self.with_response(self.cfg.optimizer.step, |p, actions, response| {
            let table = ChoiceTable::build(p, response, actions);
            let entries = frontier_on(&table, alphas)?;
            let rows: Vec<FrontierRow> = entries.iter().map(FrontierRow::of).collect();
            let mut tsv = String::from("alpha\tstatus\texpected_profit\texpected_churn\tdual_gap\tmultiplier\n");
            for r in &rows {
                let _ = writeln!(
                    tsv,
                    "{:.6}\t{}\t{}\t{:.8}\t{}\t{}",
                    r.alpha,
                    r.status,
                    opt(r.expected_profit),
                    r.expected_churn,
                    opt(r.dual_gap),
                    opt(r.multiplier)
                );
            }
            let mut plans = String::from("id");
            for e in &entries {
                let _ = write!(plans, "\talpha_{:.4}", e.alpha());
            }
            plans.push('\n');
            for (i, r) in p.records().iter().enumerate() {
                plans.push_str(&r.id.to_string());
                for e in &entries {
                    match e.point() {
                        Some(pt) => {
                            let _ = write!(plans, "\t{:.6}", pt.plan[i]);
                        }
                        None => plans.push('\t'),
                    }
                }
                plans.push('\n');
            }
            write_text(&self.path("frontier.tsv"), &tsv)?;
            write_json(&self.path("frontier.json"), &rows)?;
            write_text(&self.path("frontier_plans.tsv"), &plans)
        })
    }

    fn boundary(&self) -> Result<(), CliError> {
        self.with_response(self.cfg.optimizer.step, |p, actions, response| {
            let table = ChoiceTable::build(p, response, actions);
            let realized = realized_outcome(p, response);
            let sol = boundary_on(&table, realized);
            let a = FrontierRow::of(&sol.a);
            match &sol.a {
                FrontierEntry::Solved(pt) => log::info!(
                    "boundary: A earns {:.2} vs realized {:.2} at churn {:.4} <= {:.4}",
                    pt.expected_profit,
                    realized.profit,
                    pt.expected_churn,
                    realized.churn
                ),
                FrontierEntry::Infeasible { .. } => log::warn!("boundary: solution A is infeasible"),
            }
            let b = sol.b.as_ref().map(|m| {
                serde_json::json!({
                    "profit_floor": m.profit_floor,
                    "expected_profit": m.expected_profit,
                    "expected_churn": m.expected_churn,
                    "dual_gap": m.dual_gap,
                })
            });
            let summary = serde_json::json!({
                "realized": realized,
                "a": a,
                "b": match &b {
                    Ok(v) => v.clone(),
                    Err(msg) => serde_json::json!({ "status": "infeasible", "reason": msg }),
                },
            });
            let mut plans = String::from("id\tobserved\ta\tb\n");
            for (i, r) in p.records().iter().enumerate() {
                let pa = sol.a.point().map(|pt| pt.plan[i]);
                let pb = sol.b.as_ref().ok().map(|m| m.plan[i]);
                let _ = writeln!(plans, "{}\t{:.6}\t{}\t{}", r.id, r.rate_change, opt(pa), opt(pb));
            }
            write_json(&self.path("boundary.json"), &summary)?;
            write_text(&self.path("boundary_plans.tsv"), &plans)
        })
    }

    fn multiperiod(&self) -> Result<(), CliError> {
        let mp = &self.cfg.optimizer.multiperiod;
        self.with_response(mp.step, |p, actions, response| {
            let tau = mp.tau;
            let eligible = p.filter(|r| r.tenure as usize >= tau)?;
            log::info!(
                "multiperiod: {} of {} policies with tenure >= {tau}",
                eligible.len(),
                p.len()
            );
            let solve = |feedback: &dyn CompetitivenessUpdate| -> Result<RenewalPlan, CliError> {
                let caps = if mp.caps.is_empty() {
                    default_caps(&eligible, response, feedback, tau, &mp.solver)?
                } else {
                    mp.caps.clone()
                };
                Ok(multiperiod(&eligible, response, actions, &caps, feedback, &mp.solver)?)
            };
            let plan = match mp.feedback {
                Feedback::CompetitorsFixed => solve(&CompetitorsFixed)?,
                Feedback::Frozen => solve(&FrozenCompetitiveness)?,
            };
            let summary = PlanSummary {
                policies: eligible.len(),
                tau,
                caps: &plan.caps,
                years: &plan.years,
                objective: plan.objective,
                dual_bound: plan.dual_bound,
                dual_gap: plan.dual_gap,
                multipliers: &plan.multipliers,
                iterations: plan.iterations,
                converged: plan.converged,
                feedback: mp.feedback,
            };
            let mut years = String::from("year\tcap\tchurn\tprofit\n");
            for (j, y) in plan.years.iter().enumerate() {
                let _ = writeln!(years, "{}\t{:.6}\t{:.8}\t{:.4}", j + 1, plan.caps[j], y.churn, y.profit);
            }
            let mut rates = String::from("id");
            for j in 1..=tau {
                let _ = write!(rates, "\tyear_{j}");
            }
            rates.push('\n');
            for (r, row) in eligible.records().iter().zip(&plan.rates) {
                rates.push_str(&r.id.to_string());
                for t in row {
                    let _ = write!(rates, "\t{t:.6}");
                }
                rates.push('\n');
            }
            write_json(&self.path("multiperiod.json"), &summary)?;
            write_text(&self.path("multiperiod.tsv"), &years)?;
            write_text(&self.path("multiperiod_plan.tsv"), &rates)
        })
    }

    fn write_tune(&self, name: &str, report: &TuneReport) -> Result<(), CliError> {
        write_json(&self.path(&format!("{name}.json")), report)?;
        write_text(&self.path(&format!("{name}.tsv")), &report.to_tsv())
    }

    fn tune_ps(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let grid = self.load_grid()?;
        let base = self.ps_config();
        let kind = self.cfg.kind;
        let evaluate = |b: &BoostConfig, train: &[usize], hold: &[usize]| -> Result<FoldScore, CliError> {
            let cfg = PsConfig {
                boost: b.clone(),
                ..base.clone()
            };
            let model = match kind {
                TreatmentKind::Discrete => fit_discrete_ps_on(&p, &grid, &cfg, train, hold)?,
                TreatmentKind::Continuous => fit_continuous_gps_on(&p, &grid, grid.bounds(), &cfg, train, hold)?,
            };
            let held = p.subset(hold)?;
            Ok(FoldScore {
                metric: asam(&held, &model, &grid)?.overall_after,
                rounds: ensemble(&model).diagnostics().best_round,
            })
        };
        let report = tune(
            p.len(),
            &base.boost,
            &self.cfg.tune,
            self.cfg.seed,
            "held-out ASAM",
            evaluate,
        )?;
        self.write_tune("tune_ps", &report)
    }

    fn tune_response(&self) -> Result<(), CliError> {
        let p = self.trimmed()?;
        let ps = self.load_ps()?;
        let ps = self.require_continuous(&ps, "tune-response")?;
        let mut base = self.cfg.response.boosted.boost.clone();
        base.seed = self.cfg.seed;
        let report = tune_dose_response(&p, ps, &base, &self.cfg.tune, self.cfg.seed)?;
        self.write_tune("tune_response", &report)
    }
}

/// Sequential search for the boosted dose-response model, scored by held-out
/// Bernoulli log-loss.
pub fn tune_dose_response(
    portfolio: &Portfolio,
    ps: &PropensityModel,
    base: &BoostConfig,
    config: &crate::tune::TuneConfig,
    seed: u64,
) -> Result<TuneReport, CliError> {
    tune(
        portfolio.len(),
        base,
        config,
        seed,
        "held-out log-loss",
        |b, train, hold| {
            let dr = fit_boosted_dr_on(portfolio, ps, b, train, hold)?;
            Ok(FoldScore {
                metric: dr.holdout_loss,
                rounds: dr.ensemble.diagnostics().best_round,
            })
        },
    )
}

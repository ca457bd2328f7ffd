//! Experiment orchestration. Every run writes `report.json`, `summary.txt`
//! and `config.toml` (the resolved config) into the output directory, plus
//! `fields.sdaf` and CSV tables when the experiment produces them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sdaf_core::diagnostics::{
    self, DiagnoseOptions, DiagnosticsReport, GrowthOptions, MinimaxEstimates, NamedVerdict, Provenance, Verdict,
};
use sdaf_core::functional::{self as fun};
use sdaf_core::solver::{self, CriticalPoint};
use sdaf_core::spectral::{self, SpectralData};
use sdaf_core::target::TargetManifold;
use sdaf_core::{ActionConfig, HomotopyClass, MapField, PlainSpinorField, SurfaceDomain, Target};

use crate::archive::{write_atomic, FieldArchive, FORMAT};
use crate::config::{Experiment, ExperimentConfig, InitialBlock};
use crate::error::{CliError, Result};
use crate::export;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub config_fingerprint: String,
    pub config: ExperimentConfig,
    pub verdict: Verdict,
    pub checks: Vec<NamedVerdict>,
    pub result: Value,
    pub diagnostics: Option<DiagnosticsReport>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    /// 0 when every check passes, 2 when one fails.
    pub fn exit_code(&self) -> i32 {
        match self.report.verdict {
            Verdict::Fail => 2,
            Verdict::Pass | Verdict::NotApplicable => 0,
        }
    }
}

struct Produced {
    checks: Vec<NamedVerdict>,
    result: Value,
    diagnostics: Option<DiagnosticsReport>,
    archive: Option<FieldArchive>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    domain: SurfaceDomain,
    target: Target,
    class: HomotopyClass,
    fingerprint: u64,
    out: &'a Path,
}

fn check(name: &str, ok: bool, measured: f64, tolerance: f64) -> NamedVerdict {
    NamedVerdict {
        name: name.into(),
        verdict: Verdict::from_bool(ok),
        measured,
        tolerance,
    }
}

fn json_of<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Serialize(e.to_string()))
}

fn dir_create(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })
}

/// Load a config file, apply overrides and the seed, and run.
pub fn run(kind: Experiment, config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(config_path, &opts.overrides)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("sdaf-out"));
    run_config(kind, &cfg, &out)
}

pub fn run_config(kind: Experiment, cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate(kind)?;
    let ctx = Ctx {
        cfg,
        domain: cfg.domain()?,
        target: cfg.target()?,
        class: cfg.class()?,
        fingerprint: cfg.fingerprint(),
        out,
    };
    dir_create(out)?;
    let produced = match kind {
        Experiment::Solve => run_solve(&ctx)?,
        Experiment::Saddle => run_saddle(&ctx)?,
        Experiment::Continue => run_continue(&ctx)?,
        Experiment::Flow => run_flow(&ctx)?,
        Experiment::Spectrum => run_spectrum(&ctx)?,
        Experiment::Diagnose => run_diagnose(&ctx)?,
        Experiment::Uniqueness => run_uniqueness(&ctx)?,
        Experiment::Convexity => run_convexity(&ctx)?,
        Experiment::Growthcheck => run_growth(&ctx)?,
    };
    let verdict = if produced.checks.iter().any(|c| c.verdict == Verdict::Fail) {
        Verdict::Fail
    } else if !produced.checks.is_empty() && produced.checks.iter().all(|c| c.verdict == Verdict::NotApplicable) {
        Verdict::NotApplicable
    } else {
        Verdict::Pass
    };
    let report = RunReport {
        format: FORMAT.into(),
        experiment: kind,
        seed: cfg.seed,
        config_fingerprint: format!("{:016x}", ctx.fingerprint),
        config: cfg.clone(),
        verdict,
        checks: produced.checks,
        result: produced.result,
        diagnostics: produced.diagnostics,
    };
    if let Some(a) = &produced.archive {
        a.save(&out.join("fields.sdaf"))?;
    }
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Serialize(e.to_string()))?;
    write_atomic(&out.join("report.json"), &json)?;
    write_atomic(&out.join("summary.txt"), summary(&report).as_bytes())?;
    Ok(RunOutcome {
        report,
        out_dir: out.to_path_buf(),
    })
}

/// Human-readable digest of a report.
pub fn summary(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment  {}", r.experiment.name());
    let _ = writeln!(s, "verdict     {:?}", r.verdict);
    let _ = writeln!(s, "seed        {}", r.seed);
    let _ = writeln!(s, "config      {}", r.config_fingerprint);
    let d = &r.config.domain;
    let _ = writeln!(
        s,
        "domain      n = {}, side {}, spin ({:+}, {:+})",
        d.n, d.side_length, d.spin_structure[0], d.spin_structure[1]
    );
    for c in &r.checks {
        let _ = writeln!(
            s,
            "check       {:<28} {:<14} measured {:.6e} tolerance {:.1e}",
            c.name,
            format!("{:?}", c.verdict),
            c.measured,
            c.tolerance
        );
    }
    if let Some(dg) = &r.diagnostics {
        let e = &dg.energies;
        let _ = writeln!(s, "action      {:.12e}", e.action.total);
        let _ = writeln!(s, "E_alpha     {:.12e}", e.alpha_energy);
        let _ = writeln!(s, "psi_L4      {:.12e}", e.psi_l4);
        let _ = writeln!(s, "monitor E   {:.12e}", e.monitor_energy);
        let _ = writeln!(s, "residual    {:.3e}", dg.residuals.combined);
        if let Some(lp) = dg.lambda_plus {
            let _ = writeln!(s, "lambda+     {lp:.12e}");
        }
        let c = &dg.concentration;
        let _ = writeln!(
            s,
            "flags       {} of {} centers at eps0 = {} (r = {:.4})",
            c.flagged,
            c.energies.len(),
            c.eps0,
            c.radius
        );
    }
    s
}

fn initial_state(ctx: &Ctx) -> Result<(MapField, Option<PlainSpinorField>)> {
    let d = &ctx.domain;
    let seed = ctx.cfg.seed;
    let (phi, psi) = match &ctx.cfg.initial {
        InitialBlock::Smooth { amplitude } => match ctx.target {
            Target::Torus(t) => {
                let a = ctx.class.winding_matrix().expect("torus class");
                (MapField::smooth_torus_map(d, t, a, *amplitude, seed)?, None)
            }
            Target::Sphere(_) => {
                if ctx.class != HomotopyClass::Degree(0) {
                    return Err(CliError::key(
                        "initial.kind",
                        "smooth sphere starts have degree 0; use kind = \"bubble\" for degree 1",
                    ));
                }
                (MapField::smooth_sphere_map(d, *amplitude, seed)?, None)
            }
        },
        InitialBlock::Affine { offset } => match ctx.target {
            Target::Torus(t) => (
                MapField::affine_torus(d, t, ctx.class.winding_matrix().expect("torus class"), *offset)?,
                None,
            ),
            Target::Sphere(_) => return Err(CliError::key("initial.kind", "affine starts need a torus target")),
        },
        InitialBlock::Constant { point } => {
            let mut p = vec![0.0; ctx.target.ambient_dim()];
            if point.len() != p.len() {
                return Err(CliError::key(
                    "initial.point",
                    format!("expected {} coordinates, got {}", p.len(), point.len()),
                ));
            }
            ctx.target.project(point, &mut p)?;
            (MapField::constant(d, ctx.target, &p)?, None)
        }
        InitialBlock::Bubble { center, scale, radius } => match ctx.target {
            Target::Sphere(_) => (MapField::sphere_bubble(d, *center, *scale, *radius)?, None),
            Target::Torus(_) => return Err(CliError::key("initial.kind", "bubble starts need a sphere target")),
        },
        InitialBlock::Archive { path } => {
            let a = FieldArchive::load(path)?;
            a.check_domain(d, path)?;
            if a.phi.target != ctx.target {
                return Err(CliError::key(
                    "initial.path",
                    format!("archive target is the {}, config asks for the {}", a.phi.target.name(), ctx.target.name()),
                ));
            }
            (a.phi, a.psi)
        }
    };
    if phi.class != ctx.class {
        return Err(CliError::key(
            "class",
            format!("initial map is in class {}, config asks for {}", phi.class, ctx.class),
        ));
    }
    Ok((phi, psi))
}

fn provenance(ctx: &Ctx) -> Provenance {
    Provenance {
        config_fingerprint: ctx.fingerprint,
        seed: ctx.cfg.seed,
    }
}

fn diagnose_at(ctx: &Ctx, phi: &MapField, psi: &PlainSpinorField, action: &ActionConfig, opts: &DiagnoseOptions) -> Result<DiagnosticsReport> {
    Ok(diagnostics::diagnose(&ctx.domain, phi, psi, action, opts, provenance(ctx))?)
}

fn spectrum_of(ctx: &Ctx, phi: &MapField) -> Result<SpectralData> {
    let s = &ctx.cfg.spectrum;
    let zt = s.zero_threshold.unwrap_or_else(|| spectral::default_zero_threshold(&ctx.domain));
    Ok(spectral::dirac_spectrum_with(&ctx.domain, phi, s.count, zt, &s.eigen)?)
}

fn archive(ctx: &Ctx, phi: &MapField, psi: Option<&PlainSpinorField>) -> FieldArchive {
    FieldArchive::new(&ctx.domain, phi.clone(), psi.cloned(), ctx.fingerprint, ctx.cfg.seed)
}

fn point_json(cp: &CriticalPoint) -> Value {
    json!({
        "action": cp.action,
        "residuals": cp.residuals,
        "kind": cp.kind,
        "class": cp.class,
        "converged": cp.converged,
        "nontrivial": cp.nontrivial,
        "iterations": cp.iterations,
        "spectral": cp.spectral,
        "history": cp.history,
    })
}

fn run_solve(ctx: &Ctx) -> Result<Produced> {
    let alpha = ctx.cfg.action.alpha;
    let (phi0, _) = initial_state(ctx)?;
    let min = solver::minimize_alpha_energy(&ctx.domain, &phi0, alpha, &ctx.cfg.solver)?;
    let checks = vec![check(
        "minimizer_converged",
        min.converged,
        min.residuals.combined,
        ctx.cfg.solver.grad_tol,
    )];
    let zero = PlainSpinorField::zeros(&ctx.domain, min.phi.ambient_dim());
    // alpha = 1 has no admissible perturbation, so no action report.
    let diagnostics = match ctx.cfg.action_config() {
        Ok(a) => Some(diagnose_at(ctx, &min.phi, &zero, &a, &ctx.cfg.diagnostics)?),
        Err(_) => None,
    };
    if let Some(d) = &diagnostics {
        export::export_concentration(ctx.out, &d.concentration)?;
    }
    let mut result = point_json(&min);
    result["m_theta"] = json!(min.action.total);
    Ok(Produced {
        checks,
        result,
        diagnostics,
        archive: Some(archive(ctx, &min.phi, None)),
    })
}

fn minimax(ctx: &Ctx, min: &CriticalPoint, data: &SpectralData, action: &ActionConfig) -> Result<Option<MinimaxEstimates>> {
    match &ctx.cfg.minimax {
        Some(b) => Ok(Some(diagnostics::minimax_estimates(
            &ctx.domain,
            min,
            data,
            action,
            &b.options(ctx.cfg.seed),
        )?)),
        None => Ok(None),
    }
}

fn minimax_checks(est: &MinimaxEstimates, action: &ActionConfig, checks: &mut Vec<NamedVerdict>) {
    if action.epsilon > 0.0 {
        checks.push(check("linking_a_below_m", est.a_estimate <= est.m_theta + 1e-12 * est.m_theta.abs().max(1.0), est.a_estimate - est.m_theta, 0.0));
        checks.push(check("linking_m_below_b", est.m_theta < est.b_estimate, est.b_estimate - est.m_theta, 0.0));
    } else {
        let gap = (est.b_estimate - est.b_quadratic).abs();
        checks.push(check("b_quadratic", gap <= 1e-8, gap, 1e-8));
    }
}

fn run_saddle(ctx: &Ctx) -> Result<Produced> {
    let action = ctx.cfg.action_config()?;
    let (phi0, _) = initial_state(ctx)?;
    let min = solver::minimize_alpha_energy(&ctx.domain, &phi0, action.alpha, &ctx.cfg.solver)?;
    let data = spectrum_of(ctx, &min.phi)?;
    let mp = solver::mountain_pass_init(&ctx.domain, &min, &data, &action)?;
    let mut cp = solver::newton_solve(&ctx.domain, &mp.phi, &mp.psi, &action, &ctx.cfg.solver)?;
    cp.spectral = Some((&data).into());
    let m_theta = min.action.total;
    let mut checks = vec![
        check("newton_converged", cp.converged, cp.residuals.combined, ctx.cfg.solver.grad_tol),
        check("nontrivial_spinor", cp.nontrivial, solver::spinor_l4(&ctx.domain, &cp.psi), 0.0),
        check("action_above_m_theta", cp.action.total > m_theta, cp.action.total - m_theta, 0.0),
    ];
    let est = minimax(ctx, &min, &data, &action)?;
    if let Some(e) = &est {
        minimax_checks(e, &action, &mut checks);
    }
    let diagnostics = diagnose_at(ctx, &cp.phi, &cp.psi, &action, &ctx.cfg.diagnostics)?;
    export::export_spectrum(ctx.out, &data)?;
    export::export_concentration(ctx.out, &diagnostics.concentration)?;
    let mut result = point_json(&cp);
    result["m_theta"] = json!(m_theta);
    result["mountain_pass"] = json!({
        "radius": mp.radius,
        "height": mp.height,
        "base": mp.base,
        "max_radius": mp.max_radius,
    });
    result["minimax"] = json_of(&est)?;
    Ok(Produced {
        checks,
        result,
        diagnostics: Some(diagnostics),
        archive: Some(archive(ctx, &cp.phi, Some(&cp.psi))),
    })
}

fn run_continue(ctx: &Ctx) -> Result<Produced> {
    let schedule = ctx.cfg.schedule()?;
    let (phi0, _) = initial_state(ctx)?;
    let rep = solver::continuation_run(&ctx.domain, &schedule, &phi0)?;
    export::export_continuation(ctx.out, &rep)?;
    let failed = rep.stages.iter().filter(|s| !s.converged).count();
    let checks = vec![
        check("stages_converged", failed == 0, failed as f64, 0.0),
        check("energy_bound", rep.bound_violations == 0, rep.bound_violations as f64, schedule.energy_bound),
    ];
    let (diagnostics, archive_out) = match (rep.points.last(), rep.stages.iter().rev().find(|s| s.action.is_some())) {
        (Some(p), Some(stage)) => {
            let eps = 1.0 / stage.k as f64;
            let action = match schedule.mu {
                Some(mu) => ActionConfig::with_exponent(stage.alpha, eps, mu)?,
                None => ActionConfig::new(stage.alpha, eps)?,
            };
            (
                Some(diagnose_at(ctx, &p.phi, &p.psi, &action, &ctx.cfg.diagnostics)?),
                Some(archive(ctx, &p.phi, Some(&p.psi))),
            )
        }
        _ => (None, None),
    };
    let result = json!({
        "stages": rep.stages,
        "energy_bound": rep.energy_bound,
        "bound_violations": rep.bound_violations,
        "unperturbed_residuals": rep.unperturbed_residuals,
    });
    Ok(Produced {
        checks,
        result,
        diagnostics,
        archive: archive_out,
    })
}

fn run_flow(ctx: &Ctx) -> Result<Produced> {
    let action = ctx.cfg.action_config()?;
    let (phi0, psi0) = initial_state(ctx)?;
    let psi0 = match psi0 {
        Some(p) => p,
        None => fun::random_tangent_spinor(&ctx.domain, &phi0, ctx.cfg.seed).scaled(ctx.cfg.flow.psi_amplitude),
    };
    let horizon = ctx.cfg.flow.horizon.unwrap_or(ctx.cfg.solver.flow_horizon);
    let tr = solver::pseudo_gradient_flow(&ctx.domain, &phi0, &psi0, &action, &ctx.cfg.solver, horizon)?;
    export::export_flow(ctx.out, &tr)?;
    let checks = vec![
        check("pseudo_gradient_bounds", tr.violations == 0, tr.violations as f64, 0.0),
        check("monotone_action", tr.monotonicity_violations == 0, tr.monotonicity_violations as f64, 0.0),
    ];
    let diagnostics = diagnose_at(ctx, &tr.phi, &tr.psi, &action, &ctx.cfg.diagnostics)?;
    let result = json!({
        "accepted": tr.accepted,
        "rejections": tr.rejections,
        "violations": tr.violations,
        "monotonicity_violations": tr.monotonicity_violations,
        "decrease": tr.decrease(),
        "predicted_decrease": tr.predicted_decrease(),
        "stopped": tr.stopped,
        "final_time": tr.records.last().map(|r| r.t),
    });
    Ok(Produced {
        checks,
        result,
        diagnostics: Some(diagnostics),
        archive: Some(archive(ctx, &tr.phi, Some(&tr.psi))),
    })
}

fn run_spectrum(ctx: &Ctx) -> Result<Produced> {
    let (phi, _) = initial_state(ctx)?;
    let data = spectrum_of(ctx, &phi)?;
    export::export_spectrum(ctx.out, &data)?;
    let mut checks = Vec::new();
    if let Some(lp) = data.lambda_plus {
        checks.push(check("lambda_plus_positive", lp > 0.0, lp, 0.0));
    }
    let diagnostics = match ctx.cfg.action_config() {
        Ok(action) => {
            let zero = PlainSpinorField::zeros(&ctx.domain, phi.ambient_dim());
            let opts = DiagnoseOptions {
                spectral_count: 0,
                ..ctx.cfg.diagnostics
            };
            let mut d = diagnose_at(ctx, &phi, &zero, &action, &opts)?;
            d.lambda_plus = data.lambda_plus;
            d.spectrum = Some((&data).into());
            Some(d)
        }
        Err(_) => None,
    };
    let result = json!({
        "eigenvalues": data.eigenvalues,
        "residuals": data.residuals,
        "kernel_dimension": data.kernel_dimension(),
        "zero_threshold": data.zero_threshold,
        "lambda_plus": data.lambda_plus,
        "restarts": data.restarts,
    });
    let mut a = archive(ctx, &phi, None);
    a.aux.insert("eigenvalues".into(), data.eigenvalues.clone());
    Ok(Produced {
        checks,
        result,
        diagnostics,
        archive: Some(a),
    })
}

fn run_diagnose(ctx: &Ctx) -> Result<Produced> {
    let action = ctx.cfg.action_config()?;
    let (phi, psi) = initial_state(ctx)?;
    let psi = psi.unwrap_or_else(|| PlainSpinorField::zeros(&ctx.domain, phi.ambient_dim()));
    let report = diagnose_at(ctx, &phi, &psi, &action, &ctx.cfg.diagnostics)?;
    export::export_concentration(ctx.out, &report.concentration)?;
    let mut checks = report.verdicts.clone();
    let mut result = json!({});
    if ctx.cfg.minimax.is_some() {
        let min = solver::minimize_alpha_energy(&ctx.domain, &phi, action.alpha, &ctx.cfg.solver)?;
        let data = spectrum_of(ctx, &min.phi)?;
        let est = minimax(ctx, &min, &data, &action)?.expect("minimax block present");
        minimax_checks(&est, &action, &mut checks);
        result["minimax"] = json_of(&est)?;
    }
    Ok(Produced {
        checks,
        result,
        archive: Some(archive(ctx, &phi, Some(&psi))),
        diagnostics: Some(report),
    })
}

fn run_uniqueness(ctx: &Ctx) -> Result<Produced> {
    let rep = diagnostics::uniqueness_experiment(
        &ctx.domain,
        ctx.target,
        ctx.class,
        ctx.cfg.action.alpha,
        ctx.cfg.uniqueness.trials,
        ctx.cfg.seed,
        &ctx.cfg.solver,
    )?;
    let checks = vec![NamedVerdict {
        name: "uniqueness".into(),
        verdict: rep.verdict,
        measured: rep.max_deviation,
        tolerance: 1e-6,
    }];
    Ok(Produced {
        checks,
        result: json_of(&rep)?,
        diagnostics: None,
        archive: None,
    })
}

fn run_convexity(ctx: &Ctx) -> Result<Produced> {
    let (phi0, _) = initial_state(ctx)?;
    let amp = ctx.cfg.convexity.amplitude;
    let seed = ctx.cfg.seed.wrapping_add(1);
    let phi1 = match ctx.target {
        Target::Torus(t) => MapField::smooth_torus_map(&ctx.domain, t, ctx.class.winding_matrix().expect("torus class"), amp, seed)?,
        Target::Sphere(_) => MapField::smooth_sphere_map(&ctx.domain, amp, seed)?,
    };
    let rep = diagnostics::convexity_experiment(&ctx.domain, &phi0, &phi1, ctx.cfg.action.alpha, ctx.cfg.convexity.steps)?;
    let checks = vec![NamedVerdict {
        name: "convexity".into(),
        verdict: rep.verdict,
        measured: rep.min_second_difference,
        tolerance: rep.tolerance,
    }];
    let mut a = archive(ctx, &phi0, None);
    a.aux.insert("phi1".into(), phi1.values.clone());
    Ok(Produced {
        checks,
        result: json_of(&rep)?,
        diagnostics: None,
        archive: Some(a),
    })
}

fn run_growth(ctx: &Ctx) -> Result<Produced> {
    let hook = ctx.cfg.perturbation();
    let opts = GrowthOptions {
        samples: ctx.cfg.growth.samples,
        seed: ctx.cfg.seed,
        mu: hook.exponent(),
        alpha: ctx.cfg.action.alpha,
    };
    let rep = diagnostics::growth_condition_check(&hook, ctx.target, &opts)?;
    let checks = rep
        .conditions
        .iter()
        .filter(|c| c.required)
        .map(|c| NamedVerdict {
            name: c.name.clone(),
            verdict: c.verdict,
            measured: c.measured.unwrap_or(f64::NAN),
            tolerance: 0.0,
        })
        .collect();
    Ok(Produced {
        checks,
        result: json_of(&rep)?,
        diagnostics: None,
        archive: None,
    })
}

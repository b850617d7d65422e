use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use polyot::evalkit::{self, MetricsReport, SampleRecord};
use polyot::fit::{self, FitTrace};
use polyot::pml::{pml_loss, LossSchedule};
use polyot::raster::rasterize;
use polyot::transport::{sharp_value, sinkhorn, uniform_marginals, CostMatrix};
use polyot::{Error, Polygon64};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::config::{ensure_parent, CliConfig};
use crate::{Cli, Command, LossKind};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Eval {
            samples,
            predictions,
            self_eval,
            resolution,
            out,
        } => {
            if resolution.is_some() {
                cfg.resolution = resolution;
            }
            start(&mut cfg)?;
            eval(
                &cfg,
                &samples,
                predictions.as_deref(),
                self_eval,
                out.as_deref(),
            )
        }
        Command::Fit {
            reference,
            loss,
            steps,
            seed,
            lr,
            sigma,
            rotate,
            init,
            epsilon_rel,
            trace,
            csv,
            out,
        } => {
            if let Some(steps) = steps {
                cfg.fit = cfg.fit.with_steps(steps);
            }
            if let Some(seed) = seed {
                cfg.fit.seed = seed;
            }
            if let Some(lr) = lr {
                cfg.fit.learning_rate = lr;
            }
            if let Some(sigma) = sigma {
                cfg.fit.init_noise_sigma = sigma;
            }
            if let Some(e) = epsilon_rel {
                cfg.sinkhorn.epsilon_rel = e;
            }
            let total = cfg.fit.steps;
            cfg.fit.loss_schedule = match loss {
                LossKind::Pml => LossSchedule::pure_matching(total),
                LossKind::L1 => LossSchedule::pure_l1(total),
                LossKind::Scheduled => LossSchedule {
                    total_steps: total,
                    ..cfg.fit.loss_schedule
                },
            };
            start(&mut cfg)?;
            run_fit(
                &cfg,
                &reference,
                rotate,
                init.as_deref(),
                trace.as_deref(),
                csv.as_deref(),
                out.as_deref(),
            )
        }
        Command::Sinkhorn {
            cost,
            epsilon_rel,
            max_iterations,
            dump,
        } => {
            if let Some(e) = epsilon_rel {
                cfg.sinkhorn.epsilon_rel = e;
            }
            if let Some(m) = max_iterations {
                cfg.sinkhorn.max_iterations = m;
            }
            start(&mut cfg)?;
            run_sinkhorn(&cfg, &cost, dump.as_deref())
        }
        Command::Rasterize {
            polygon,
            resolution,
            out,
        } => {
            if resolution.is_some() {
                cfg.resolution = resolution;
            }
            start(&mut cfg)?;
            run_rasterize(&cfg, &polygon, out.as_deref())
        }
        Command::Gen {
            count,
            vertices,
            seed,
            sigma,
            resolution,
            out,
        } => {
            if let Some(sigma) = sigma {
                cfg.fit.init_noise_sigma = sigma;
            }
            if resolution.is_some() {
                cfg.resolution = resolution;
            }
            start(&mut cfg)?;
            gen(&cfg, count, vertices, seed, &out)
        }
        Command::Loss {
            predicted,
            reference,
            epsilon_rel,
        } => {
            if let Some(e) = epsilon_rel {
                cfg.sinkhorn.epsilon_rel = e;
            }
            start(&mut cfg)?;
            let value = pml_loss(
                &read_polygon(&predicted)?,
                &read_polygon(&reference)?,
                &cfg.sinkhorn,
            )?;
            println!("{}", serde_json::to_string(&value.record())?);
            Ok(())
        }
    }
}

/// Maps an error to an exit code after printing it. Missing predictions
/// exit with 2, everything else with 1.
pub fn report_error(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingPredictions(ids)) => {
            eprintln!("error: missing predictions for {} sample(s):", ids.len());
            for id in ids {
                eprintln!("  {id}");
            }
            ExitCode::from(2)
        }
        Some(Error::Parse(lines)) => {
            eprintln!("error: {err:#}");
            for l in lines {
                eprintln!("  line {}: {}", l.line, l.message);
            }
            ExitCode::from(1)
        }
        _ => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn start(cfg: &mut CliConfig) -> Result<()> {
    // The top-level solver section governs every solve, fits included.
    cfg.fit.sinkhorn = cfg.sinkhorn;
    cfg.echo();
    cfg.validate()
}

fn read_polygon(path: &Path) -> Result<Polygon64> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let poly: Polygon64 = serde_json::from_str(&text)
        .with_context(|| format!("parsing polygon {}", path.display()))?;
    Ok(poly)
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = ensure_parent(path)?;
    let mut tmp = NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn eval(
    cfg: &CliConfig,
    samples_path: &Path,
    predictions: Option<&Path>,
    self_eval: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut samples = evalkit::load_samples(samples_path)?;
    if let Some(p) = predictions {
        let preds = evalkit::load_predictions(p)?;
        evalkit::attach_predictions(&mut samples, preds)?;
    } else if self_eval {
        for s in &mut samples {
            s.predicted_polygon = Some(s.reference_polygon.clone());
        }
    }
    let report: MetricsReport =
        evalkit::evaluate_dataset(&samples, cfg.resolution.map(|r| r.pair()))?;
    if let Some(out) = out {
        write_atomic(out, &pretty_json(&report)?)?;
    }
    println!("samples: {}", report.n_samples);
    println!("mIoU: {}", percent(report.miou));
    for (k, v) in &report.p_at {
        println!("P@{k}: {}", percent(*v));
    }
    Ok(())
}

fn run_fit(
    cfg: &CliConfig,
    reference_path: &Path,
    rotate: usize,
    init: Option<&Path>,
    trace_path: Option<&Path>,
    csv_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let reference = read_polygon(reference_path)?;
    reference.ensure_ring()?;
    let start = match init {
        Some(p) => read_polygon(p)?,
        None => fit::perturb(&reference, cfg.fit.init_noise_sigma, cfg.fit.seed)?,
    }
    .rotate_vertices(rotate);
    let trace: FitTrace<f64> = fit::fit_polygon(&reference, &start, &cfg.fit)?;

    if let Some(p) = trace_path {
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf)?;
        write_atomic(p, &buf)?;
    }
    if let Some(p) = csv_path {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        write_atomic(p, &buf)?;
    }
    if let Some(p) = out {
        write_atomic(p, &pretty_json(&trace.final_polygon)?)?;
    }
    println!("steps: {}", trace.records.len());
    println!("first-step loss: {:e}", trace.initial_loss());
    println!("final loss: {:e}", trace.final_loss());
    match trace.final_iou {
        Some(iou) => println!("final IoU: {iou:.6}"),
        None => println!("final IoU: n/a"),
    }
    Ok(())
}

#[derive(Serialize)]
struct PlanDump<'a> {
    cost: Vec<Vec<f64>>,
    sharp: f64,
    plan: &'a polyot::TransportPlan64,
}

fn run_sinkhorn(cfg: &CliConfig, cost_path: &Path, dump: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(cost_path)
        .with_context(|| format!("reading {}", cost_path.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .with_context(|| format!("parsing cost matrix {}", cost_path.display()))?;
    let cost = CostMatrix::from_rows(rows)?;
    let marginals = uniform_marginals(cost.rows(), cost.cols())?;
    let plan = sinkhorn(&cost, &marginals, &cfg.sinkhorn)?;
    let sharp = sharp_value(&cost, &plan)?;
    println!("sharp: {sharp:e}");
    println!("entropic: {:e}", plan.entropic_value);
    println!("epsilon: {:e}", plan.epsilon);
    println!("row residual: {:e}", plan.row_residual);
    println!("col residual: {:e}", plan.col_residual);
    println!("iterations: {}", plan.iterations_used);
    println!("converged: {}", plan.converged);
    if !plan.converged {
        eprintln!("warning: iteration budget exhausted before the marginals converged");
    }
    if let Some(p) = dump {
        let d = PlanDump {
            cost: cost.matrix().to_rows(),
            sharp,
            plan: &plan,
        };
        write_atomic(p, &pretty_json(&d)?)?;
    }
    Ok(())
}

fn run_rasterize(cfg: &CliConfig, polygon: &Path, out: Option<&Path>) -> Result<()> {
    let poly = read_polygon(polygon)?;
    if poly.signed_area()? == 0.0 {
        bail!(Error::DegeneratePolygon(
            "polygon encloses zero area".into()
        ));
    }
    let (w, h) = cfg.resolution_or_default().pair();
    let mask = rasterize(&poly, w, h)?;
    let bytes = pretty_json(&mask)?;
    match out {
        Some(p) => write_atomic(p, &bytes)?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    eprintln!(
        "set pixels: {} of {}",
        mask.count(),
        w as usize * h as usize
    );
    Ok(())
}

fn gen(cfg: &CliConfig, count: usize, vertices: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(anyhow!("--count must be at least 1"));
    }
    let (width, height) = cfg.resolution_or_default().pair();
    let suite =
        fit::make_perturbed_suite_with::<f64>(seed, count, vertices, cfg.fit.init_noise_sigma)?;
    let samples: Vec<SampleRecord> = suite
        .into_iter()
        .enumerate()
        .map(|(i, pair)| SampleRecord {
            id: format!("syn-{i:05}"),
            width,
            height,
            instruction: String::new(),
            reference_polygon: pair.reference,
            predicted_polygon: Some(pair.init),
        })
        .collect();
    let mut buf = Vec::new();
    evalkit::write_samples(&mut buf, &samples)?;
    write_atomic(out, &buf)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

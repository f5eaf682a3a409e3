use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use elmo_core::lie::{check_linearizable as run_check, InputAffineSystem, SampleBox};
use elmo_core::model::{split_blocks, train as fit, ELModel, ModelInit, Scalers, TrainError, TrajectoryDataset};
use elmo_core::sim::{
    free_run, r2, simulate_closed_loop, tracking_segments, ControllerKind, ModelPlant, PlantSpec, SegmentSummary,
    SimError, SimulationTrace,
};
use elmo_core::{LqrDesign, Tensor};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{echo, load, CheckConfig, DesignConfig, EvalConfig, GenDataConfig, SimulateConfig, TrainCmdConfig};
use crate::Common;

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn channel_names(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

/// Per-channel R² of the free-run `(y, z)` against a record.
fn r2_table(y: &Tensor, z: &Tensor, data: &TrajectoryDataset) -> Result<Vec<(String, f64)>> {
    let dims = data.dims();
    let col = |t: &Tensor, c: usize| -> Vec<f64> { (0..t.rows()).map(|r| t.get(r, c)).collect() };
    let mut rows = Vec::new();
    for (name, pred, actual, k) in [("y", y, &data.y, dims.n), ("z", z, &data.z, dims.p)] {
        for c in 0..k {
            let v = r2(&col(pred, c), &col(actual, c)).with_context(|| format!("R² of {name}{}", c + 1))?;
            rows.push((format!("{name}{}", c + 1), v));
        }
    }
    Ok(rows)
}

fn write_r2(out: &Path, table: &[(String, f64)]) -> Result<f64> {
    let avg = table.iter().map(|r| r.1).sum::<f64>() / table.len().max(1) as f64;
    let mut w = csv::Writer::from_path(out.join("r2.csv"))?;
    w.write_record(["channel", "r2"])?;
    for (name, v) in table {
        w.write_record([name.clone(), v.to_string()])?;
    }
    w.write_record(["average".to_string(), avg.to_string()])?;
    w.flush()?;
    println!("Coefficient of determination R²");
    for (name, v) in table {
        println!("  {name:<8} {v:.4}");
    }
    println!("  {:<8} {avg:.4}", "average");
    Ok(avg)
}

/// The model as a plant, with a divergence box taken from the record.
fn model_plant(model: ELModel, data: &TrajectoryDataset) -> Result<ModelPlant> {
    let n = data.dims().n;
    let mut lower = vec![f64::INFINITY; n];
    let mut upper = vec![f64::NEG_INFINITY; n];
    for r in 0..data.len() {
        for c in 0..n {
            lower[c] = lower[c].min(data.y.get(r, c));
            upper[c] = upper[c].max(data.y.get(r, c));
        }
    }
    for c in 0..n {
        if upper[c] <= lower[c] {
            lower[c] -= 1.0;
            upper[c] += 1.0;
        }
    }
    Ok(ModelPlant::new(model, lower, upper)?)
}

fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let data = TrajectoryDataset::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    data.validate().with_context(|| format!("validating dataset {}", path.display()))?;
    Ok(data)
}

pub fn gen_data(c: &Common) -> Result<()> {
    let mut cfg: GenDataConfig = load(&c.config)?.config;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    prepare(&c.out)?;
    let hash = echo(&c.out, "gen-data", &cfg)?;
    let mut data = cfg.generate()?;
    data.meta.source = match &cfg.plant {
        PlantSpec::Teacher(_) => "teacher".into(),
        PlantSpec::Nonlinear => "nonlinear".into(),
    };
    data.meta.seed = Some(cfg.seed);
    data.meta.config_hash = Some(hash);
    let path = c.out.join("data.csv");
    data.write(&path)?;
    let back = read_dataset(&path)?;
    println!("wrote {} records ({} s) to {}", back.len(), cfg.duration, path.display());
    Ok(())
}

pub fn train(c: &Common) -> Result<()> {
    let loaded = load::<TrainCmdConfig>(&c.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    prepare(&c.out)?;
    echo(&c.out, "train", &cfg)?;
    let data = read_dataset(&loaded.resolve(&cfg.data))?;
    let init =
        ELModel::new(data.dims(), cfg.architecture.clone(), Scalers::fit(&data), &ModelInit::default(), cfg.seed);
    let outcome = match fit(init, &data, &cfg.train) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, reason, checkpoint }) => {
            checkpoint.save(&c.out.join("checkpoint.elmo"))?;
            bail!("training diverged at epoch {epoch}: {reason}; last finite parameters saved as checkpoint.elmo");
        }
        Err(e) => return Err(e.into()),
    };
    let model = outcome.model;
    model.save(&c.out.join("model.elmo"))?;
    let mut w = csv::Writer::from_path(c.out.join("loss_history.csv"))?;
    w.write_record(["epoch", "learning_rate", "train_loss", "validation_loss"])?;
    for h in &outcome.history {
        w.write_record([
            h.epoch.to_string(),
            h.learning_rate.to_string(),
            h.train_loss.to_string(),
            h.validation_loss.to_string(),
        ])?;
    }
    w.flush()?;
    check_round_trips(&model, &data, cfg.round_trip_tolerance)?;

    let table = match &cfg.test {
        Some(p) => {
            let test = read_dataset(&loaded.resolve(p))?;
            let plant = model_plant(model, &test)?;
            let (y, z) = free_run(&plant, &test, cfg.substeps)?;
            r2_table(&y, &z, &test)?
        }
        None => {
            let (_, held) = split_blocks(data.len(), cfg.train.validation_fraction, cfg.train.validation_blocks);
            if held.is_empty() {
                bail!("no held-out data: set `test` or a positive validation_fraction");
            }
            let parts: Vec<TrajectoryDataset> = held.into_iter().map(|r| data.slice(r)).collect();
            let plant = model_plant(model, &data)?;
            let mut pred = (Vec::new(), Vec::new());
            for part in &parts {
                let (y, z) = free_run(&plant, part, cfg.substeps)?;
                pred.0.extend_from_slice(y.data());
                pred.1.extend_from_slice(z.data());
            }
            let joined = concat(&parts);
            let dims = data.dims();
            let y = Tensor::new(joined.len(), dims.n, pred.0);
            let z = Tensor::new(joined.len(), dims.p, pred.1);
            r2_table(&y, &z, &joined)?
        }
    };
    write_r2(&c.out, &table)?;
    Ok(())
}

/// Stacks the records of several datasets (time column is not adjusted).
fn concat(parts: &[TrajectoryDataset]) -> TrajectoryDataset {
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        out.t.extend_from_slice(&p.t);
        for (a, b) in [
            (&mut out.v, &p.v),
            (&mut out.d, &p.d),
            (&mut out.ddot, &p.ddot),
            (&mut out.y, &p.y),
            (&mut out.ydot, &p.ydot),
            (&mut out.z, &p.z),
        ] {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            *a = Tensor::new(a.rows() + b.rows(), a.cols(), data);
        }
    }
    out
}

/// The trained maps must stay invertible on the data: `Φ` and `Ψ` round
/// trips on every 50th record.
fn check_round_trips(model: &ELModel, data: &TrajectoryDataset, tol: f64) -> Result<()> {
    for r in (0..data.len()).step_by(50) {
        let (y, v, d) = (data.y.row_slice(r), data.v.row_slice(r), data.d.row_slice(r));
        let x = model.x_from_y(y, d)?;
        let y2 = model.y_from_x(&x, d)?;
        let u = model.u_from_v(v, y, d)?;
        let v2 = model.v_from_u(&u, y, d)?;
        let err = y
            .iter()
            .zip(&y2)
            .chain(v.iter().zip(&v2))
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        if err > tol || err.is_nan() {
            bail!("trained model fails its inverse round trip at record {r} (relative error {err:e})");
        }
    }
    Ok(())
}

pub fn eval(c: &Common) -> Result<()> {
    let loaded = load::<EvalConfig>(&c.config)?;
    let cfg = &loaded.config;
    prepare(&c.out)?;
    echo(&c.out, "eval", cfg)?;
    let model_path = loaded.resolve(&cfg.model);
    let model = ELModel::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let data = read_dataset(&loaded.resolve(&cfg.data))?;
    if model.dims != data.dims() {
        bail!("model {:?} and dataset {:?} dimensions differ", model.dims, data.dims());
    }
    let plant = model_plant(model, &data)?;
    let (y, z) = free_run(&plant, &data, cfg.substeps)?;
    let dims = data.dims();
    let mut w = csv::Writer::from_path(c.out.join("predictions.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend(channel_names("y", dims.n));
    header.extend(channel_names("z", dims.p));
    w.write_record(&header)?;
    for r in 0..data.len() {
        let mut rec = vec![data.t[r].to_string()];
        rec.extend(y.row_slice(r).iter().chain(z.row_slice(r)).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_r2(&c.out, &r2_table(&y, &z, &data)?)?;
    Ok(())
}

/// A model file, or the model inside a teacher plant.
fn controller_model(
    base: &crate::config::Loaded<impl Sized>,
    model: &Option<std::path::PathBuf>,
    plant: Option<&PlantSpec>,
) -> Result<ELModel> {
    match (model, plant) {
        (Some(p), _) => {
            let path = base.resolve(p);
            ELModel::load(&path).with_context(|| format!("loading model {}", path.display()))
        }
        (None, Some(PlantSpec::Teacher(t))) => Ok(t.model()?),
        _ => Err(anyhow!("no controller model: give `model` or a teacher `plant`")),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct DesignOut {
    y_d: Vec<f64>,
    d: Vec<f64>,
    x_d: Vec<f64>,
    u_d: Vec<f64>,
    /// Physical input holding the target.
    v_d: Vec<f64>,
    riccati_residual: f64,
    target_residual: f64,
    /// Largest real part of the closed-loop eigenvalues.
    abscissa: f64,
    k: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<f64>,
}

pub fn design_lqr(c: &Common) -> Result<()> {
    let loaded = load::<DesignConfig>(&c.config)?;
    let cfg = &loaded.config;
    prepare(&c.out)?;
    echo(&c.out, "design-lqr", cfg)?;
    let model = controller_model(&loaded, &cfg.model, cfg.plant.as_ref())?;
    let design = LqrDesign::for_model(&model, &cfg.y_d, &cfg.d, &cfg.weights, cfg.target_tolerance)?;
    let y = model.y_from_x(design.x_d.as_slice(), &cfg.d)?;
    let out = DesignOut {
        y_d: cfg.y_d.clone(),
        d: cfg.d.clone(),
        x_d: design.x_d.as_slice().to_vec(),
        u_d: design.u_d.as_slice().to_vec(),
        v_d: model.v_from_u(design.u_d.as_slice(), &y, &cfg.d)?,
        riccati_residual: design.riccati_residual,
        target_residual: design.target_residual,
        abscissa: design.abscissa,
        k: rows(&design.k),
        p: rows(&design.p),
        a: rows(&design.a),
        b: rows(&design.b),
        c: design.c.as_slice().to_vec(),
    };
    fs::write(c.out.join("design.toml"), toml::to_string(&out)?)?;
    println!(
        "target residual {:.2e}, Riccati residual {:.2e}, closed-loop abscissa {:.4}",
        out.target_residual, out.riccati_residual, out.abscissa
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    controller: String,
    rows: usize,
    max_h: f64,
    /// Largest value of each barrier row over the run.
    max_h_rows: Vec<f64>,
    rmse: f64,
    /// Largest KKT residual of the barrier QPs (zero without them).
    max_qp_kkt: f64,
    segments: Vec<SegmentSummary>,
    /// R² of the controller model's output prediction against the plant's
    /// outputs along the run (`None` for a constant channel).
    z_r2: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct SegmentRatio {
    start: f64,
    end: f64,
    /// Barrier-controller RMSE over LQR RMSE.
    ratio: f64,
}

#[derive(Serialize)]
struct SimulateSummary {
    runs: Vec<RunSummary>,
    /// Unconstrained segments, when both LQR and the barrier controller ran.
    icbf_vs_lqr: Vec<SegmentRatio>,
}

fn summarize(trace: &SimulationTrace, cfg: &SimulateConfig, model: &ELModel) -> Result<RunSummary> {
    let k = trace.meta.barrier_rows;
    let max_h_rows: Vec<f64> =
        (0..k).map(|i| trace.rows.iter().map(|r| r.h[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let ss: f64 = trace.rows.iter().map(|r| r.y.iter().zip(&r.y_d).map(|(y, d)| (y - d) * (y - d)).sum::<f64>()).sum();
    let p = trace.meta.dims.p;
    let mut pred = vec![Vec::new(); p];
    let mut actual = vec![Vec::new(); p];
    for r in &trace.rows {
        let z = model.predict_z(&r.v, &r.y, &r.d)?;
        for c in 0..p {
            pred[c].push(z[c]);
            actual[c].push(r.z[c]);
        }
    }
    Ok(RunSummary {
        controller: trace.meta.controller.name().to_string(),
        rows: trace.rows.len(),
        max_h: trace.max_h(),
        max_h_rows,
        rmse: (ss / trace.rows.len().max(1) as f64).sqrt(),
        max_qp_kkt: trace.meta.max_qp_kkt,
        segments: tracking_segments(trace, &cfg.scenario, model)?,
        z_r2: (0..p).map(|c| r2(&pred[c], &actual[c]).ok()).collect(),
    })
}

fn gnuplot_script(traces: &[(String, &SimulationTrace)]) -> String {
    let mut s = String::from("# gnuplot script: gnuplot -p plot.gp\nset datafile separator ','\nset key autotitle columnhead\nset xlabel 't [s]'\n");
    let Some((_, first)) = traces.first() else { return s };
    let cols = first.columns();
    let idx = |name: &str| cols.iter().position(|c| c == name).map(|i| i + 1);
    let n = first.meta.dims.n;
    let _ = writeln!(s, "set multiplot layout {},1", n + 1);
    for i in 1..=n {
        let (y, yd) = (idx(&format!("y{i}")).unwrap_or(1), idx(&format!("yd{i}")).unwrap_or(1));
        let _ = write!(s, "set ylabel 'y{i}'\nplot ");
        for (k, (file, _)) in traces.iter().enumerate() {
            let _ = write!(s, "'{file}' using 1:{y} with lines title '{file} y{i}', ");
            if k == 0 {
                let _ = write!(s, "'{file}' using 1:{yd} with lines dashtype 2 title 'target', ");
            }
        }
        s.truncate(s.len() - 2);
        s.push('\n');
    }
    s.push_str("set ylabel 'max h'\n");
    let rows = first.meta.barrier_rows;
    if rows == 0 {
        s.push_str("plot 0 notitle\n");
    } else {
        let h0 = idx("h1").unwrap_or(1);
        let expr: Vec<String> = (0..rows).map(|j| format!("${}", h0 + j)).collect();
        let max = expr.iter().skip(1).fold(expr[0].clone(), |a, e| format!("max({a}, {e})"));
        s.push_str("max(a, b) = a > b ? a : b\n");
        s.push_str("plot ");
        for (file, _) in traces {
            let _ = write!(s, "'{file}' using 1:({max}) with lines title '{file}', ");
        }
        s.truncate(s.len() - 2);
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

pub fn simulate(c: &Common, plot: bool) -> Result<()> {
    let loaded = load::<SimulateConfig>(&c.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = c.seed {
        cfg.scenario.seed = s;
    }
    prepare(&c.out)?;
    let hash = echo(&c.out, "simulate", &cfg)?;
    let plant = cfg.plant.build()?;
    let model = controller_model(&loaded, &cfg.model, Some(&cfg.plant))?;
    let kinds = if cfg.compare.is_empty() { vec![cfg.scenario.controller] } else { cfg.compare.clone() };
    let mut traces = Vec::new();
    for kind in kinds {
        let mut sc = cfg.scenario.clone();
        sc.controller = kind;
        let file = format!("trace_{}.csv", kind.name());
        let mut trace = match simulate_closed_loop(plant.as_ref(), &model, &sc) {
            Ok(t) => t,
            Err(SimError::Interrupted { t, source, mut trace }) => {
                trace.meta.config_hash = hash.clone();
                trace.write_csv(fs::File::create(c.out.join(&file))?)?;
                bail!("{} run stopped at t = {t}: {source}; partial trace written to {file}", kind.name());
            }
            Err(e) => return Err(e.into()),
        };
        trace.meta.config_hash = hash.clone();
        trace.write_csv(std::io::BufWriter::new(fs::File::create(c.out.join(&file))?))?;
        traces.push((file, trace));
    }
    let runs = traces.iter().map(|(_, t)| summarize(t, &cfg, &model)).collect::<Result<Vec<_>>>()?;
    let find = |k: ControllerKind| runs.iter().find(|r| r.controller == k.name());
    let icbf_vs_lqr = match (find(ControllerKind::Icbf), find(ControllerKind::Lqr)) {
        (Some(i), Some(l)) => i
            .segments
            .iter()
            .zip(&l.segments)
            .filter(|(a, b)| a.unconstrained == Some(true) && b.unconstrained == Some(true))
            .map(|(a, b)| SegmentRatio {
                start: a.start,
                end: a.end,
                ratio: if b.rmse > 0.0 {
                    a.rmse / b.rmse
                } else if a.rmse == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                },
            })
            .collect(),
        _ => Vec::new(),
    };
    let icbf_max_h = find(ControllerKind::Icbf).map(|r| r.max_h);
    let summary = SimulateSummary { runs, icbf_vs_lqr };
    fs::write(c.out.join("summary.toml"), toml::to_string(&summary)?)?;
    if plot {
        let refs: Vec<(String, &SimulationTrace)> = traces.iter().map(|(f, t)| (f.clone(), t)).collect();
        fs::write(c.out.join("plot.gp"), gnuplot_script(&refs))?;
    }
    for r in &summary.runs {
        println!("{:<7} max h {:>12.4e}  rmse {:.4}", r.controller, r.max_h, r.rmse);
    }
    for s in &summary.icbf_vs_lqr {
        println!("unconstrained [{}, {}): icbf/lqr rmse ratio {:.3}", s.start, s.end, s.ratio);
    }
    if let Some(h) = icbf_max_h.filter(|h| *h > cfg.max_h_tolerance) {
        bail!("icbf run violated a constraint: max h = {h:e} > {:e}", cfg.max_h_tolerance);
    }
    Ok(())
}

pub fn check_linearizable(c: &Common) -> Result<()> {
    let loaded = load::<CheckConfig>(&c.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = c.seed {
        cfg.options.seed = s;
    }
    prepare(&c.out)?;
    echo(&c.out, "check-linearizable", &cfg)?;
    let (sys, file_box) = match (&cfg.fixture, &cfg.system) {
        (Some(name), None) => (InputAffineSystem::fixture(name)?, None),
        (None, Some(p)) => {
            let path = loaded.resolve(p);
            let text = fs::read_to_string(&path).with_context(|| format!("reading system {}", path.display()))?;
            InputAffineSystem::from_toml_str(&text).with_context(|| format!("parsing system {}", path.display()))?
        }
        _ => bail!("give exactly one of `fixture` and `system`"),
    };
    let domain = cfg.domain.clone().or(file_box).unwrap_or_else(|| SampleBox::symmetric(sys.dim(), 1.0));
    let report = run_check(&sys, &domain, &cfg.options)?;
    fs::write(c.out.join("report.txt"), format!("{report}\n"))?;
    let mut w = csv::Writer::from_path(c.out.join("samples.csv"))?;
    let mut header = vec!["sample".to_string()];
    header.extend(channel_names("y", sys.dim()));
    header.extend(["sigma_ratio", "rank", "max_residual"].map(String::from));
    w.write_record(&header)?;
    for (k, s) in report.samples.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(s.y.iter().map(|v| v.to_string()));
        rec.extend([s.sigma_ratio().to_string(), s.rank.to_string(), s.max_residual().to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("{report}");
    Ok(())
}

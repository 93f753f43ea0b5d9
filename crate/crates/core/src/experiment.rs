//! Experiment runners behind the command-line tool. Each runner takes a
//! validated config, writes its artifacts under `out_dir`, and returns the
//! rows it wrote.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::analysis::{
    pca_fit, pca_theorem_check, pearson, smooth_signal, variance_gap, variance_loss, PcaTheorem, VarianceReport,
};
use crate::config::{
    DiagnoseConfig, FeatureSpec, GenerateConfig, MetricConfig, PcaDemoConfig, RunConfig, ScatterConfig,
    SmoothingDemoConfig, TwoStageConfig,
};
use crate::datasets::{gen_anisotropic_cloud, gen_curve_dataset, save_dump, DatasetHandle, DumpDtype};
use crate::error::{Error, Result};
use crate::linalg::{variance, VarianceKind};
use crate::metric::{fit_gaussian, frechet_distance, FeatureExtractor, GaussianStats};
use crate::report::{
    write_history, write_latent_law, write_report, write_scatter, write_table, CellKind, CellMetrics, LatentLawRow,
    ReportRow, ScatterRow, Stage,
};
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::Tensor;
use crate::twostage::{
    collect_latents, train_second_stage, GenStage, Generated, PixelStats, RenormMode, TwoStageModel,
};
use crate::vae::{variance_law, LossBreakdown, VaeModel};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_width(model: &VaeModel, data: &DatasetHandle) -> Result<()> {
    if model.data_dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            op: "model/dataset",
            expected: vec![data.len(), model.data_dim()],
            actual: vec![data.len(), data.dim()],
        });
    }
    Ok(())
}

/// Real-data side of a Fréchet comparison, fitted once.
pub struct FfdScorer {
    pub extractor: FeatureExtractor,
    pub real: GaussianStats,
    pub spec: FeatureSpec,
}

impl FfdScorer {
    pub fn new(spec: FeatureSpec, real: &Tensor) -> Result<Self> {
        let extractor = spec.build(real)?;
        let stats = fit_gaussian(&extractor.extract(real)?)?;
        Ok(Self {
            extractor,
            real: stats,
            spec,
        })
    }

    pub fn score(&self, generated: &Tensor) -> Result<f64> {
        frechet_distance(&self.real, &fit_gaussian(&self.extractor.extract(generated)?)?)
    }
}

pub struct Trained {
    pub model: VaeModel,
    pub history: Vec<LossBreakdown>,
    pub data: DatasetHandle,
}

/// Builds and trains the first-stage VAE described by `cfg`.
pub fn train_vae(cfg: &RunConfig, rng: &mut Rng) -> Result<Trained> {
    let data = cfg.load_dataset()?;
    let dim = data.dim();
    let mut model = VaeModel::new(&cfg.architecture(dim), cfg.effective_beta(dim), rng)?;
    let history = model.train(&data.images, &cfg.train_config(), rng)?;
    Ok(Trained { model, history, data })
}

/// Writes `checkpoint/` and `history.csv`.
pub fn run_train(cfg: &RunConfig) -> Result<Trained> {
    ensure_dir(&cfg.out_dir)?;
    let trained = train_vae(cfg, &mut Rng::new(cfg.seed))?;
    trained.model.save(&cfg.out_dir.join("checkpoint"))?;
    write_history(&cfg.out_dir.join("history.csv"), &trained.history)?;
    Ok(trained)
}

/// Reconstruction through the posterior mean, with both variance-loss
/// conventions and the variance law of the encoder on `x`.
pub fn reconstruction_metrics(model: &VaeModel, x: &Tensor) -> Result<(VarianceReport, f64, Tensor)> {
    let params = model.encode(x)?;
    let rec = model.decode(&params.mu)?;
    let report = variance_loss(x, &rec)?;
    Ok((report, variance_law(&params)?.law, rec))
}

pub fn latent_law_rows(model: &VaeModel, x: &Tensor) -> Result<Vec<LatentLawRow>> {
    let p = model.encode(x)?;
    let n = p.batch() as f64;
    let var = p.variance();
    Ok((0..p.latent_dim())
        .map(|j| {
            let col = |t: &Tensor, f: &dyn Fn(f64) -> f64| (0..p.batch()).map(|i| f(t.get(i, j))).sum::<f64>() / n;
            LatentLawRow {
                component: j,
                mean_mu: col(&p.mu, &|v| v),
                mean_mu_sq: col(&p.mu, &|v| v * v),
                mean_sigma_sq: col(&var, &|v| v),
            }
        })
        .collect())
}

pub struct DiagnoseOutcome {
    pub row: ReportRow,
    pub latent: Vec<LatentLawRow>,
}

/// REC-stage report of a checkpoint on a dataset: `report.csv` and
/// `variance_law.csv`.
pub fn run_diagnose(cfg: &DiagnoseConfig) -> Result<DiagnoseOutcome> {
    let model = VaeModel::load(&cfg.checkpoint)?;
    let data = DatasetHandle::open(&cfg.dataset, cfg.dataset_limit)?;
    check_width(&model, &data)?;
    let scorer = FfdScorer::new(cfg.features, &data.images)?;
    let (rep, law, rec) = reconstruction_metrics(&model, &data.images)?;
    let row = ReportRow {
        run_id: cfg.run_id.clone(),
        stage: Stage::Rec,
        renorm: RenormMode::None,
        seed: cfg.seed,
        mse: Some(rep.mse),
        loss_per_feature: rep.loss_per_feature,
        loss_paper_axis: rep.loss_paper_axis,
        variance_law: law,
        ffd: scorer.score(&rec)?,
        features: cfg.features.to_string(),
    };
    let latent = latent_law_rows(&model, &data.images)?;
    ensure_dir(&cfg.out_dir)?;
    write_report(&cfg.out_dir.join("report.csv"), std::slice::from_ref(&row))?;
    write_latent_law(&cfg.out_dir.join("variance_law.csv"), &latent)?;
    Ok(DiagnoseOutcome { row, latent })
}

fn vae_cell(cfg: &ScatterConfig, data: &DatasetHandle, cell: usize, k: usize, depth: usize, beta: f64) -> Result<CellMetrics> {
    let mut run = cfg.run.clone();
    run.latent_dim = k;
    run.hidden = vec![cfg.width; depth];
    run.beta = beta;
    run.validate()?;
    let mut rng = Rng::new(cfg.run.seed).split(cell as u64);
    let dim = data.dim();
    let mut model = VaeModel::new(&run.architecture(dim), run.effective_beta(dim), &mut rng)?;
    model.train(&data.images, &run.train_config(), &mut rng)?;
    let (rep, law, _) = reconstruction_metrics(&model, &data.images)?;
    Ok(CellMetrics {
        mse: rep.mse,
        loss_per_feature: rep.loss_per_feature,
        loss_paper_axis: rep.loss_paper_axis,
        variance_law: Some(law),
    })
}

/// Trains every grid cell (in parallel, reported in grid order) and adds PCA
/// baselines; writes `scatter.csv`. Failed cells keep a row with the error.
pub fn run_scatter(cfg: &ScatterConfig) -> Result<Vec<ScatterRow>> {
    let data = cfg.run.load_dataset()?;
    let mut cells = Vec::new();
    for &k in &cfg.latent_dims {
        for &d in &cfg.depths {
            for &b in &cfg.betas {
                cells.push((k, d, b));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut rows: Vec<ScatterRow> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, &(k, depth, beta))| ScatterRow {
                cell: i,
                kind: CellKind::Vae { depth, beta },
                latent_dim: k,
                outcome: vae_cell(cfg, &data, i, k, depth, beta).map_err(|e| e.to_string()),
            })
            .collect()
    });

    let max_k = cfg.pca_ks.iter().copied().filter(|&k| k <= data.dim()).max();
    let full = max_k.map(|k| pca_fit(&data.images, k)).transpose()?;
    for (j, &k) in cfg.pca_ks.iter().enumerate() {
        let outcome = match &full {
            Some(full) if k <= full.k => full
                .truncated(k)
                .and_then(|m| m.reconstruct(&data.images))
                .and_then(|rec| variance_loss(&data.images, &rec))
                .map(|rep| CellMetrics {
                    mse: rep.mse,
                    loss_per_feature: rep.loss_per_feature,
                    loss_paper_axis: rep.loss_paper_axis,
                    variance_law: None,
                })
                .map_err(|e| e.to_string()),
            _ => Err(format!("k = {k} exceeds data dimension {}", data.dim())),
        };
        rows.push(ScatterRow {
            cell: cells.len() + j,
            kind: CellKind::Pca,
            latent_dim: k,
            outcome,
        });
    }
    ensure_dir(&cfg.run.out_dir)?;
    write_scatter(&cfg.run.out_dir.join("scatter.csv"), &rows)?;
    Ok(rows)
}

/// Pearson correlation of (mse, loss_per_feature) over successful rows.
pub fn scatter_correlation(rows: &[ScatterRow]) -> Result<f64> {
    let ok: Vec<&CellMetrics> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let a: Vec<f64> = ok.iter().map(|m| m.mse).collect();
    let b: Vec<f64> = ok.iter().map(|m| m.loss_per_feature).collect();
    pearson(&a, &b)
}

pub struct TwoStageOutcome {
    pub rows: Vec<ReportRow>,
    pub model: TwoStageModel,
    pub first_history: Vec<LossBreakdown>,
    pub second_history: Vec<LossBreakdown>,
}

fn stage_label(stage: GenStage, mode: RenormMode) -> Stage {
    match (stage, mode) {
        (GenStage::Gen1, _) => Stage::Gen1,
        (GenStage::Gen2, RenormMode::None) => Stage::Gen2,
        (GenStage::Gen2, _) => Stage::Gen2Renorm,
    }
}

fn stage_tag(stage: GenStage) -> &'static str {
    match stage {
        GenStage::Gen1 => "gen1",
        GenStage::Gen2 => "gen2",
    }
}

fn head_rows(t: &Tensor, n: usize) -> Tensor {
    let keep: Vec<usize> = (0..t.rows().min(n)).collect();
    t.select_rows(&keep)
}

/// Full two-stage experiment. Writes `report.csv` (REC plus GEN-1 / GEN-2
/// under every renormalization mode), histories, latent codes, the model,
/// sample dumps and the renormalization factors of each batch.
///
/// Within a stage all modes start from the same noise, so their scores are
/// paired.
pub fn run_twostage(cfg: &TwoStageConfig) -> Result<TwoStageOutcome> {
    let run = &cfg.run;
    let base = Rng::new(run.seed);
    let data = run.load_dataset()?;
    let (first, first_history) = match &cfg.checkpoint {
        Some(dir) => (VaeModel::load(dir)?, Vec::new()),
        None => {
            let mut rng = base.split(0);
            let dim = data.dim();
            let mut m = VaeModel::new(&run.architecture(dim), run.effective_beta(dim), &mut rng)?;
            let h = m.train(&data.images, &run.train_config(), &mut rng)?;
            (m, h)
        }
    };
    check_width(&first, &data)?;
    let x = &data.images;
    let scorer = FfdScorer::new(cfg.features, x)?;
    let features = cfg.features.to_string();

    let (rep, first_law, rec) = reconstruction_metrics(&first, x)?;
    let mut rows = vec![ReportRow {
        run_id: run.run_id.clone(),
        stage: Stage::Rec,
        renorm: RenormMode::None,
        seed: run.seed,
        mse: Some(rep.mse),
        loss_per_feature: rep.loss_per_feature,
        loss_paper_axis: rep.loss_paper_axis,
        variance_law: first_law,
        ffd: scorer.score(&rec)?,
        features: features.clone(),
    }];

    let latents = collect_latents(&first, x, cfg.latent_source, &mut base.split(1))?;
    let mut second_cfg = cfg.second.clone();
    second_cfg.beta = run.beta_unit.effective(cfg.second_beta, first.latent_dim);
    let (second, second_history) = train_second_stage(&latents, &second_cfg, &mut base.split(2))?;
    let second_law = variance_law(&second.encode(&latents)?)?.law;

    let mut model = TwoStageModel::new(first, PixelStats::of(x)?).with_second(second)?;
    model.latent_source = cfg.latent_source;
    model.recenter_pixels = cfg.recenter_pixels;

    ensure_dir(&run.out_dir)?;
    let samples_dir = run.out_dir.join("samples");
    ensure_dir(&samples_dir)?;
    for (si, stage) in [GenStage::Gen1, GenStage::Gen2].into_iter().enumerate() {
        for mode in RenormMode::ALL {
            let mut rng = base.split(10 + si as u64);
            let Generated { samples, factors } = model.generate_stage(stage, cfg.n_generate, &mut rng, mode)?;
            let gap = variance_gap(x, &samples)?;
            rows.push(ReportRow {
                run_id: run.run_id.clone(),
                stage: stage_label(stage, mode),
                renorm: mode,
                seed: run.seed,
                mse: None,
                loss_per_feature: gap.loss_per_feature,
                loss_paper_axis: gap.loss_paper_axis,
                variance_law: if stage == GenStage::Gen1 { first_law } else { second_law },
                ffd: scorer.score(&samples)?,
                features: features.clone(),
            });
            let tag = format!("{}_{mode}", stage_tag(stage));
            if cfg.dump_samples > 0 {
                save_dump(
                    &samples_dir.join(format!("{tag}.vltd")),
                    &head_rows(&samples, cfg.dump_samples),
                    DumpDtype::F32,
                )?;
            }
            factors.write(mode, &samples_dir.join(format!("{tag}.factors.txt")))?;
        }
    }

    model.save(&run.out_dir.join("model"))?;
    save_dump(&run.out_dir.join("latents.vltd"), &latents, DumpDtype::F64)?;
    write_history(&run.out_dir.join("history.csv"), &first_history)?;
    write_history(&run.out_dir.join("second_history.csv"), &second_history)?;
    write_report(&run.out_dir.join("report.csv"), &rows)?;
    Ok(TwoStageOutcome {
        rows,
        model,
        first_history,
        second_history,
    })
}

/// Samples from a saved two-stage model: `samples.vltd` and `factors.txt`.
pub fn run_generate(cfg: &GenerateConfig) -> Result<Generated> {
    let model = TwoStageModel::load(&cfg.model)?;
    let g = model.generate_stage(cfg.stage, cfg.n, &mut Rng::new(cfg.seed), cfg.renorm)?;
    ensure_dir(&cfg.out_dir)?;
    save_dump(&cfg.out_dir.join("samples.vltd"), &g.samples, cfg.dtype)?;
    g.factors.write(cfg.renorm, &cfg.out_dir.join("factors.txt"))?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricOutcome {
    pub distance: f64,
    pub n_real: usize,
    pub n_generated: usize,
}

/// Fréchet distance between two sample files; `metric.csv` when `out_dir`
/// is set.
pub fn run_metric(cfg: &MetricConfig) -> Result<MetricOutcome> {
    let real = crate::datasets::load_matrix(&cfg.real)?;
    let gen = crate::datasets::load_matrix(&cfg.generated)?;
    if real.cols() != gen.cols() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            expected: vec![gen.rows(), real.cols()],
            actual: gen.shape().to_vec(),
        });
    }
    let scorer = FfdScorer::new(cfg.features, &real)?;
    let out = MetricOutcome {
        distance: scorer.score(&gen)?,
        n_real: real.rows(),
        n_generated: gen.rows(),
    };
    if let Some(dir) = &cfg.out_dir {
        ensure_dir(dir)?;
        let p = dir.join("metric.csv");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&p)?;
        w.write_record(["features", "distance", "n_real", "n_generated", "seed"])?;
        w.write_record([
            cfg.features.to_string(),
            out.distance.to_string(),
            out.n_real.to_string(),
            out.n_generated.to_string(),
            cfg.seed.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(out)
}

pub struct PcaDemo {
    pub points: Tensor,
    pub reconstruction: Tensor,
    pub theorem: PcaTheorem,
    pub report: VarianceReport,
}

/// Points of an elongated 2-D cloud projected onto its first principal axis:
/// `pca_points.csv` and `pca_summary.csv`.
pub fn run_pca_demo(cfg: &PcaDemoConfig) -> Result<PcaDemo> {
    let mut rng = Rng::new(cfg.seed);
    let points = gen_anisotropic_cloud(&mut rng, cfg.n, cfg.stds, cfg.rotation)?;
    let model = pca_fit(&points, 1)?;
    let reconstruction = model.reconstruct(&points)?;
    let theorem = pca_theorem_check(&points, 1)?;
    let report = variance_loss(&points, &reconstruction)?;
    ensure_dir(&cfg.out_dir)?;
    let rows: Vec<Vec<f64>> = (0..cfg.n)
        .map(|i| {
            vec![
                i as f64,
                points.get(i, 0),
                points.get(i, 1),
                reconstruction.get(i, 0),
                reconstruction.get(i, 1),
            ]
        })
        .collect();
    write_table(&cfg.out_dir.join("pca_points.csv"), &["index", "x", "y", "proj_x", "proj_y"], &rows)?;
    write_table(
        &cfg.out_dir.join("pca_summary.csv"),
        &["n", "mse", "discarded_eigen_sum", "discarded_eigen_mean", "loss_per_feature", "loss_paper_axis", "theorem_gap"],
        &[vec![
            cfg.n as f64,
            theorem.mse,
            theorem.discarded_eigen_sum,
            theorem.discarded_eigen_mean,
            theorem.loss_per_feature,
            report.loss_paper_axis,
            theorem.max_discrepancy(),
        ]],
    )?;
    Ok(PcaDemo {
        points,
        reconstruction,
        theorem,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingDemo {
    pub signal: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub mse: f64,
    /// `var(signal) − var(smoothed)` over positions.
    pub variance_loss: f64,
    pub mean_gap: f64,
}

/// A noisy periodic signal and its circular moving average:
/// `smoothing_points.csv` and `smoothing_summary.csv`.
pub fn run_smoothing_demo(cfg: &SmoothingDemoConfig) -> Result<SmoothingDemo> {
    let mut rng = Rng::new(cfg.seed);
    let curve = gen_curve_dataset(&mut rng, cfg.n_points, 1, cfg.smoothness)?;
    let noise = gaussian_sample(&mut rng, &[cfg.n_points], 0.0, cfg.noise)?;
    let signal: Vec<f64> = curve.data().iter().zip(noise.data()).map(|(c, e)| c + e).collect();
    let smoothed = smooth_signal(&signal, cfg.window)?;
    let n = signal.len() as f64;
    let mse = signal.iter().zip(&smoothed).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let kind = VarianceKind::Population;
    let variance_loss = variance(&signal, kind)? - variance(&smoothed, kind)?;
    let mean_gap = (signal.iter().sum::<f64>() - smoothed.iter().sum::<f64>()).abs() / n;
    ensure_dir(&cfg.out_dir)?;
    let rows: Vec<Vec<f64>> = (0..signal.len()).map(|t| vec![t as f64, signal[t], smoothed[t]]).collect();
    write_table(&cfg.out_dir.join("smoothing_points.csv"), &["t", "signal", "smoothed"], &rows)?;
    write_table(
        &cfg.out_dir.join("smoothing_summary.csv"),
        &["n_points", "window", "mse", "variance_loss", "mean_gap"],
        &[vec![n, cfg.window as f64, mse, variance_loss, mean_gap]],
    )?;
    Ok(SmoothingDemo {
        signal,
        smoothed,
        mse,
        variance_loss,
        mean_gap,
    })
}

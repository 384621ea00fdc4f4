use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, SiteDataset, StyleMemory, StyleStats};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{self, csv_row, CSV_HEADER};
use crate::io::{self, TensorEntry, TraceMeta, TraceRound};
use crate::metrics::{Mask, MetricAccumulator, MetricReport};
use crate::model::SegModel;
use crate::par;
use crate::params::ParamTag;
use crate::rng::{self, Purpose};
use crate::server::{Download, ServerConfig, ServerState};
use crate::site::{LossMeans, SiteState, SiteTrainConfig, SiteUpload};
use crate::tensor::Tensor;

/// Message accounting for one seed run. Style statistics travel exactly
/// once; parameter uploads/downloads once per site per round in federated
/// modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageStats {
    pub style_uploads: usize,
    pub style_downloads: usize,
    pub uploads: usize,
    pub downloads: usize,
}

/// One site's record for one round. Wall time stays in memory; the
/// serialized form (a metrics.csv row) is deterministic.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub site: usize,
    pub losses: LossMeans,
    pub eval: Option<MetricReport>,
    pub wall: std::time::Duration,
}

pub struct SeedRunOutcome {
    pub seed: u64,
    pub final_reports: Vec<MetricReport>,
    pub messages: MessageStats,
    pub records: Vec<RoundRecord>,
}

fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<SegModel> {
    let mut r = rng::global_stream(seed, Purpose::ModelInit);
    SegModel::new(cfg.model.clone(), &mut r, cfg.flags().gpd)
}

fn site_train_config(cfg: &ExperimentConfig) -> SiteTrainConfig {
    let flags = cfg.flags();
    SiteTrainConfig {
        local_iters: cfg.local_iters,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weights: cfg.loss_weights,
        ape: flags.ape,
        sge: flags.sge,
        distort_per: cfg.distort_per,
        sens_cap: cfg.sens_cap,
        sens_signed: cfg.sens_signed,
        optimizer: cfg.optimizer,
    }
}

struct SiteWork {
    site: usize,
    round: usize,
    download: Download,
    train: Arc<SiteDataset>,
    stats: StyleStats,
    memory: StyleMemory,
}

fn run_site_round(
    cfg: &ExperimentConfig,
    seed: u64,
    work: &SiteWork,
) -> Result<(SiteUpload, LossMeans)> {
    let model = build_model(cfg, seed)?;
    let mut site = SiteState::new(
        work.site,
        seed,
        model,
        work.train.clone(),
        work.stats,
        work.memory.clone(),
        site_train_config(cfg),
    );
    site.round = work.round;
    site.apply_download(&work.download.theta_g, &work.download.theta_p)?;
    let upload = site.local_train()?;
    Ok((upload, site.last_losses))
}

/// Argmax over the class axis of `[K, H, W]` logits, ties to the lowest
/// class id.
pub fn argmax_mask(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("argmax over {:?}", s)));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = logits.to_vec();
    let mut labels = vec![0u8; h * w];
    for px in 0..h * w {
        let mut best = 0usize;
        let mut best_v = d[px];
        for c in 1..k {
            let v = d[c * h * w + px];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        labels[px] = best as u8;
    }
    Mask::new(k, h, w, labels)
}

/// Metrics of one model over one test split: argmax prediction per image,
/// metrics averaged per class over samples.
pub fn evaluate(model: &SegModel, test: &SiteDataset) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(model.config.num_classes);
    for sample in &test.samples {
        let img = sample.image_tensor(test.img_size);
        let out = model.forward(&img)?;
        let pred = argmax_mask(&out.logits)?;
        acc.add(&pred, &sample.mask)?;
    }
    Ok(acc.finish())
}

fn evaluate_download(
    cfg: &ExperimentConfig,
    seed: u64,
    download: &Download,
    test: &SiteDataset,
) -> Result<MetricReport> {
    let model = build_model(cfg, seed)?;
    model.store.unflatten(ParamTag::Global, &download.theta_g)?;
    model
        .store
        .unflatten(ParamTag::Personalized, &download.theta_p)?;
    evaluate(&model, test)
}

fn trace_tensors(
    uploads: &[SiteUpload],
    omegas: &Option<Vec<crate::server::AggregationMatrix>>,
    downloads: &[Download],
) -> Vec<TensorEntry> {
    let mut tensors = Vec::new();
    for up in uploads {
        tensors.extend(io::flat_entries(
            &format!("up/{}/delta_p", up.site),
            ParamTag::Personalized,
            &up.delta_p,
        ));
        if let Some(s) = &up.sens {
            tensors.extend(io::flat_entries(
                &format!("up/{}/sens", up.site),
                ParamTag::Global,
                s,
            ));
        }
        tensors.extend(io::flat_entries(
            &format!("up/{}/theta_g", up.site),
            ParamTag::Global,
            &up.theta_g_after,
        ));
        tensors.extend(io::flat_entries(
            &format!("up/{}/theta_p", up.site),
            ParamTag::Personalized,
            &up.theta_p_after,
        ));
    }
    if let Some(omegas) = omegas {
        for (m, o) in omegas.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("omega/{m}"),
                tag: ParamTag::Global,
                shape: vec![o.layers.len(), o.sites],
                data: o.rows.iter().flatten().copied().collect(),
            });
        }
    }
    for (m, d) in downloads.iter().enumerate() {
        tensors.extend(io::flat_entries(
            &format!("down/{m}/theta_p"),
            ParamTag::Personalized,
            &d.theta_p,
        ));
    }
    if let Some(d) = downloads.first() {
        tensors.extend(io::flat_entries(
            "down/theta_g",
            ParamTag::Global,
            &d.theta_g,
        ));
    }
    tensors
}

/// Run one seed end to end, streaming metrics.csv rows as rounds finish.
/// Writes heatmap.csv, final checkpoints and optional traces under
/// `seed_dir`.
pub fn run_single_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    seed_dir: &Path,
) -> Result<SeedRunOutcome> {
    std::fs::create_dir_all(seed_dir)?;
    let trace_dir = seed_dir.join("trace");
    if cfg.trace {
        std::fs::create_dir_all(&trace_dir)?;
    }
    let flags = cfg.flags();

    let trains: Vec<Arc<SiteDataset>> = (0..cfg.sites)
        .map(|m| {
            Arc::new(data::generate_site(
                m,
                cfg.data.train_sizes[m],
                seed,
                cfg.data.img_size,
                cfg.data.style_strength,
            ))
        })
        .collect();
    let tests: Vec<Arc<SiteDataset>> = (0..cfg.sites)
        .map(|m| {
            Arc::new(data::generate_site_test(
                m,
                cfg.data.test_size,
                seed,
                cfg.data.img_size,
                cfg.data.style_strength,
            ))
        })
        .collect();
    let stats: Vec<StyleStats> = trains
        .iter()
        .map(|d| data::compute_stats(d))
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = trains.iter().map(|d| d.samples.len()).collect();

    let mut messages = MessageStats::default();
    // The style memory is exchanged exactly once, and only when the
    // cross-style machinery is in use.
    let memories: Vec<StyleMemory> = if flags.sge {
        messages.style_uploads += cfg.sites;
        messages.style_downloads += cfg.sites;
        vec![StyleMemory { stats: stats.clone() }; cfg.sites]
    } else {
        (0..cfg.sites)
            .map(|m| StyleMemory {
                stats: vec![stats[m]],
            })
            .collect()
    };

    let init = build_model(cfg, seed)?;
    let (theta_g0, theta_p0) = init.partition();
    let mut server = cfg.server_mode().map(|mode| {
        ServerState::new(
            seed,
            cfg.sites,
            theta_g0.clone(),
            theta_p0.clone(),
            counts.clone(),
            ServerConfig {
                mode,
                hn: cfg.hn_config(),
                sge_temperature: cfg.sge_temperature,
            },
        )
    });
    let mut downloads: Vec<Download> = (0..cfg.sites)
        .map(|_| Download {
            theta_g: theta_g0.clone(),
            theta_p: theta_p0.clone(),
        })
        .collect();

    let mut csv = String::from(CSV_HEADER);
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut last_omegas = None;
    let mut final_reports: Vec<MetricReport> = Vec::new();
    let metrics_path = seed_dir.join("metrics.csv");

    let finish = |csv: &str| std::fs::write(&metrics_path, csv);

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let work: Vec<SiteWork> = (0..cfg.sites)
            .map(|m| SiteWork {
                site: m,
                round: t,
                download: downloads[m].clone(),
                train: trains[m].clone(),
                stats: stats[m],
                memory: memories[m].clone(),
            })
            .collect();
        let outs = par::map_ordered(&work, cfg.sequential, |_, w| run_site_round(cfg, seed, w));
        let mut uploads = Vec::with_capacity(cfg.sites);
        let mut losses = Vec::with_capacity(cfg.sites);
        for out in outs {
            match out {
                Ok((up, lm)) => {
                    uploads.push(up);
                    losses.push(lm);
                }
                Err(e) => {
                    finish(&csv)?;
                    return Err(e);
                }
            }
        }
        if let Some(server) = server.as_mut() {
            messages.uploads += cfg.sites;
            let rr = match server.run_round(&uploads) {
                Ok(rr) => rr,
                Err(e) => {
                    finish(&csv)?;
                    return Err(e);
                }
            };
            messages.downloads += cfg.sites;
            if cfg.trace {
                let tensors = trace_tensors(&uploads, &rr.omegas, &rr.downloads);
                io::save_trace(
                    &trace_dir.join(format!("round_{t:04}.bin")),
                    &TraceRound {
                        meta: TraceMeta {
                            round: t,
                            mode: cfg.mode.as_str().into(),
                            sites: cfg.sites,
                            ape: flags.ape,
                            sge: flags.sge,
                            sens_signed: cfg.sens_signed,
                            sge_temperature: cfg.sge_temperature,
                            counts: counts.clone(),
                        },
                        tensors,
                    },
                )?;
            }
            if rr.omegas.is_some() {
                last_omegas = rr.omegas.clone();
            }
            downloads = rr.downloads;
        } else {
            downloads = uploads
                .iter()
                .map(|up| Download {
                    theta_g: up.theta_g_after.clone(),
                    theta_p: up.theta_p_after.clone(),
                })
                .collect();
        }
        let eval_now = (t + 1) % cfg.eval_interval == 0 || t + 1 == cfg.rounds;
        let reports: Vec<Option<MetricReport>> = if eval_now {
            let pairs: Vec<(Download, Arc<SiteDataset>)> = downloads
                .iter()
                .cloned()
                .zip(tests.iter().cloned())
                .collect();
            let evals = par::map_ordered(&pairs, cfg.sequential, |_, (d, test)| {
                evaluate_download(cfg, seed, d, test)
            });
            let mut out = Vec::with_capacity(cfg.sites);
            for e in evals {
                match e {
                    Ok(r) => out.push(Some(r)),
                    Err(e) => {
                        finish(&csv)?;
                        return Err(e);
                    }
                }
            }
            out
        } else {
            vec![None; cfg.sites]
        };
        let wall = started.elapsed();
        for m in 0..cfg.sites {
            let rec = RoundRecord {
                round: t,
                site: m,
                losses: losses[m],
                eval: reports[m].clone(),
                wall,
            };
            csv.push_str(&csv_row(&rec));
            records.push(rec);
        }
        if t + 1 == cfg.rounds {
            final_reports = reports.into_iter().map(|r| r.expect("final eval")).collect();
        }
    }
    finish(&csv)?;

    if let Some(omegas) = &last_omegas {
        std::fs::write(seed_dir.join("heatmap.csv"), report::heatmap_csv(omegas))?;
    }
    let ckpt_dir = seed_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for (m, d) in downloads.iter().enumerate() {
        let model = build_model(cfg, seed)?;
        model.store.unflatten(ParamTag::Global, &d.theta_g)?;
        model.store.unflatten(ParamTag::Personalized, &d.theta_p)?;
        io::save_checkpoint(&ckpt_dir.join(format!("site_{m}.ckpt")), &model.store)?;
    }
    let _ = server;
    Ok(SeedRunOutcome {
        seed,
        final_reports,
        messages,
        records,
    })
}

/// Run every seed sequentially, then write `config.json` and
/// `summary.json` into `out_dir`. On divergence the partial outputs stay
/// on disk, summary included, and the error propagates.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<report::ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let resolved =
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out_dir.join("config.json"), resolved)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        match run_single_seed(cfg, seed, &seed_dir) {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => {
                let summary = report::build_summary(cfg, &outcomes, "diverged");
                report::write_summary(out_dir, &summary)?;
                return Err(e);
            }
        }
    }
    let summary = report::build_summary(cfg, &outcomes, "ok");
    report::write_summary(out_dir, &summary)?;
    Ok(summary)
}

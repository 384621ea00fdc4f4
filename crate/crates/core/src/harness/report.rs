//! Deterministic run artifacts: metrics.csv rows, heatmap.csv of the final
//! aggregation matrices, and summary.json with per-site and average finals
//! (mean +- population std over seeds).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{MessageStats, RoundRecord, SeedRunOutcome};
use crate::server::AggregationMatrix;

pub const CSV_HEADER: &str = "t,site,seg_loss,ar_loss,csc_loss,dice,iou,assd,hd95\n";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn csv_row(rec: &RoundRecord) -> String {
    let (dice, iou, assd, hd95) = match &rec.eval {
        Some(r) => (
            Some(r.mean_dice),
            Some(r.mean_iou),
            r.mean_assd,
            r.mean_hd95,
        ),
        None => (None, None, None, None),
    };
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        rec.round,
        rec.site,
        rec.losses.seg,
        rec.losses.ar,
        rec.losses.csc,
        opt_cell(dice),
        opt_cell(iou),
        opt_cell(assd),
        opt_cell(hd95),
    )
}

pub fn heatmap_csv(omegas: &[AggregationMatrix]) -> String {
    let sites = omegas.first().map_or(0, |o| o.sites);
    let mut out = String::from("site,layer");
    for i in 0..sites {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for (m, o) in omegas.iter().enumerate() {
        for (layer, row) in o.layers.iter().zip(&o.rows) {
            out.push_str(&format!("{m},{layer}"));
            for w in row {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stat {
        mean,
        std: var.sqrt(),
    }
}

fn stat_opt(values: &[Option<f64>]) -> Option<Stat> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.len() == values.len() && !defined.is_empty() {
        Some(stat(&defined))
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStats {
    pub dice: Stat,
    pub iou: Stat,
    pub assd: Option<Stat>,
    pub hd95: Option<Stat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: usize,
    #[serde(flatten)]
    pub metrics: MetricStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub status: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub per_site: Vec<SiteSummary>,
    pub average: MetricStats,
    pub messages: MessageStats,
}

/// Final per-site metrics of one seed, already reduced to the four means.
#[derive(Debug, Clone, Copy)]
pub struct SiteFinal {
    pub dice: f64,
    pub iou: f64,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn build_summary(
    cfg: &ExperimentConfig,
    outcomes: &[SeedRunOutcome],
    status: &str,
) -> ExperimentSummary {
    let finals: Vec<Vec<SiteFinal>> = outcomes
        .iter()
        .map(|o| {
            o.final_reports
                .iter()
                .map(|r| SiteFinal {
                    dice: r.mean_dice,
                    iou: r.mean_iou,
                    assd: r.mean_assd,
                    hd95: r.mean_hd95,
                })
                .collect()
        })
        .collect();
    let seeds: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
    let messages = outcomes.iter().fold(MessageStats::default(), |a, o| {
        MessageStats {
            style_uploads: a.style_uploads + o.messages.style_uploads,
            style_downloads: a.style_downloads + o.messages.style_downloads,
            uploads: a.uploads + o.messages.uploads,
            downloads: a.downloads + o.messages.downloads,
        }
    });
    summary_from_finals(cfg, &seeds, &finals, messages, status)
}

pub fn summary_from_finals(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    finals: &[Vec<SiteFinal>],
    messages: MessageStats,
    status: &str,
) -> ExperimentSummary {
    let sites = finals.first().map_or(0, Vec::len);
    let per_site: Vec<SiteSummary> = (0..sites)
        .map(|m| {
            let dice: Vec<f64> = finals.iter().map(|f| f[m].dice).collect();
            let iou: Vec<f64> = finals.iter().map(|f| f[m].iou).collect();
            let assd: Vec<Option<f64>> = finals.iter().map(|f| f[m].assd).collect();
            let hd95: Vec<Option<f64>> = finals.iter().map(|f| f[m].hd95).collect();
            SiteSummary {
                site: m,
                metrics: MetricStats {
                    dice: stat(&dice),
                    iou: stat(&iou),
                    assd: stat_opt(&assd),
                    hd95: stat_opt(&hd95),
                },
            }
        })
        .collect();
    // The average column is the mean over sites of the per-site statistics,
    // so the bookkeeping identity holds exactly; std comes from the
    // per-seed site averages.
    let mean_over_sites = |f: &dyn Fn(&SiteSummary) -> f64| -> f64 {
        if per_site.is_empty() {
            return 0.0;
        }
        per_site.iter().map(|s| f(s)).sum::<f64>() / per_site.len() as f64
    };
    let seed_avg = |get: &dyn Fn(&SiteFinal) -> f64| -> Vec<f64> {
        finals
            .iter()
            .map(|f| f.iter().map(|s| get(s)).sum::<f64>() / f.len().max(1) as f64)
            .collect()
    };
    let avg_opt = |get: &dyn Fn(&SiteFinal) -> Option<f64>| -> Option<Stat> {
        let per_seed: Vec<Option<f64>> = finals
            .iter()
            .map(|f| {
                let vals: Vec<f64> = f.iter().filter_map(|s| get(s)).collect();
                if vals.len() == f.len() && !vals.is_empty() {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                } else {
                    None
                }
            })
            .collect();
        stat_opt(&per_seed)
    };
    let average = MetricStats {
        dice: Stat {
            mean: mean_over_sites(&|s| s.metrics.dice.mean),
            std: stat(&seed_avg(&|f| f.dice)).std,
        },
        iou: Stat {
            mean: mean_over_sites(&|s| s.metrics.iou.mean),
            std: stat(&seed_avg(&|f| f.iou)).std,
        },
        assd: avg_opt(&|f| f.assd),
        hd95: avg_opt(&|f| f.hd95),
    };
    ExperimentSummary {
        status: status.into(),
        mode: cfg.mode.as_str().into(),
        seeds: seeds.to_vec(),
        rounds: cfg.rounds,
        per_site,
        average,
        messages,
    }
}

pub fn write_summary(out_dir: &Path, summary: &ExperimentSummary) -> Result<()> {
    let text =
        serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}

/// A parsed metrics.csv row (losses always present, metrics on eval rounds).
#[derive(Debug, Clone)]
pub struct CsvRow {
    pub round: usize,
    pub site: usize,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if format!("{h}\n") == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected metrics.csv header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::Format(format!("metrics.csv line {} malformed", i + 2)));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
            }
        };
        rows.push(CsvRow {
            round: cells[0]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?,
            site: cells[1]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?,
            dice: num(cells[5])?,
            iou: num(cells[6])?,
            assd: num(cells[7])?,
            hd95: num(cells[8])?,
        });
    }
    Ok(rows)
}

/// Rebuild summary.json for a finished (or partially finished) run
/// directory from its metrics.csv files.
pub fn regenerate_summary(out_dir: &Path) -> Result<ExperimentSummary> {
    let cfg_text = std::fs::read_to_string(out_dir.join("config.json"))?;
    let cfg = ExperimentConfig::from_json(&cfg_text)?;
    let mut seeds = Vec::new();
    let mut finals: Vec<Vec<SiteFinal>> = Vec::new();
    for &seed in &cfg.seeds {
        let path = out_dir.join(format!("seed_{seed}")).join("metrics.csv");
        if !path.exists() {
            continue;
        }
        let rows = parse_metrics_csv(&std::fs::read_to_string(&path)?)?;
        let mut per_site: Vec<Option<SiteFinal>> = vec![None; cfg.sites];
        for row in rows.iter().filter(|r| r.dice.is_some()) {
            per_site[row.site] = Some(SiteFinal {
                dice: row.dice.unwrap(),
                iou: row.iou.unwrap_or(0.0),
                assd: row.assd,
                hd95: row.hd95,
            });
        }
        if per_site.iter().all(Option::is_some) {
            seeds.push(seed);
            finals.push(per_site.into_iter().map(Option::unwrap).collect());
        }
    }
    if finals.is_empty() {
        return Err(Error::Empty(format!(
            "no completed seeds under {}",
            out_dir.display()
        )));
    }
    let status = if seeds.len() == cfg.seeds.len() { "ok" } else { "partial" };
    let summary = summary_from_finals(&cfg, &seeds, &finals, MessageStats::default(), status);
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

/// Human-readable table of a summary (for the CLI).
pub fn format_summary(s: &ExperimentSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "mode={} status={} seeds={:?} rounds={}\n",
        s.mode, s.status, s.seeds, s.rounds
    ));
    let fmt_opt = |v: &Option<Stat>| {
        v.as_ref()
            .map_or("     -    ".to_string(), |s| format!("{:6.2}±{:.2}", s.mean, s.std))
    };
    out.push_str("site      dice          iou           assd          hd95\n");
    for site in &s.per_site {
        out.push_str(&format!(
            "{:<4} {:6.2}±{:.2}  {:6.2}±{:.2}  {}  {}\n",
            site.site,
            site.metrics.dice.mean,
            site.metrics.dice.std,
            site.metrics.iou.mean,
            site.metrics.iou.std,
            fmt_opt(&site.metrics.assd),
            fmt_opt(&site.metrics.hd95),
        ));
    }
    out.push_str(&format!(
        "avg  {:6.2}±{:.2}  {:6.2}±{:.2}  {}  {}\n",
        s.average.dice.mean,
        s.average.dice.std,
        s.average.iou.mean,
        s.average.iou.std,
        fmt_opt(&s.average.assd),
        fmt_opt(&s.average.hd95),
    ));
    out
}

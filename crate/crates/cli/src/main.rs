//! Command-line front end for the spinefuse pipeline.
//!
//! Four subcommands cover the stages a user actually wants to drive by hand:
//! `phantom` materializes the synthetic volume and its annotation, `render`
//! ray-marches projection images, `run` executes the full
//! detect-identify-fuse pipeline, and `sweep` repeats runs over a grid of
//! view counts and seeds. All of them read the same JSON configuration and
//! write their outputs into `--out-dir`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spinefuse_core::config::{InputConfig, RunConfig};
use spinefuse_core::detect2d::detections_to_json;
use spinefuse_core::drr::render_drr;
use spinefuse_core::geometry::make_views;
use spinefuse_core::metrics::{rows_to_csv, summarize, sweep_k};
use spinefuse_core::pipeline::{load_run_input, run_once};
use spinefuse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "spinefuse", version, about = "Multi-view spine landmark localization")]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override; every random stage derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core). Falls back to SPINEFUSE_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for output files; created if missing.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the phantom volume and write it with its annotation.
    Phantom {
        /// Override the number of vertebra bodies.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Render one projection image per view.
    Render {
        /// Override the number of views.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the full pipeline and write fused centroids plus evaluation.
    Run {
        /// Override the number of views.
        #[arg(long)]
        k: Option<usize>,
        /// Also write the dynamic-programming table and chain diagnostics.
        #[arg(long)]
        dump_dp: bool,
        /// Also write each view's per-detection probability map.
        #[arg(long)]
        dump_probmaps: bool,
    },
    /// Repeat runs over view counts and seeds, writing one CSV row each.
    Sweep {
        /// Comma-separated view counts to try.
        #[arg(long, default_value = "5,10,20")]
        k: String,
        /// Number of seeds per view count (0, 1, ..., n-1).
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var("SPINEFUSE_THREADS").ok().and_then(|s| s.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(cli.out_dir.display().to_string(), e))?;

    match cli.cmd {
        Cmd::Phantom { n } => cmd_phantom(cfg, &cli.out_dir, n),
        Cmd::Render { k } => cmd_render(cfg, &cli.out_dir, k),
        Cmd::Run { k, dump_dp, dump_probmaps } => {
            cmd_run(cfg, &cli.out_dir, k, dump_dp, dump_probmaps)
        }
        Cmd::Sweep { k, seeds } => cmd_sweep(cfg, &cli.out_dir, &k, seeds),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

fn cmd_phantom(mut cfg: RunConfig, out: &Path, n: Option<usize>) -> Result<()> {
    let InputConfig::Phantom(spec) = &mut cfg.input else {
        return Err(Error::Config(
            "the phantom command needs a phantom input configuration".into(),
        ));
    };
    if let Some(n) = n {
        spec.n_vertebrae = n;
    }
    cfg.validate()?;
    let (vol, ann) = load_run_input(&cfg)?;
    let ann = ann.expect("a phantom input always carries its annotation");
    vol.save(&out.join("phantom"))?;
    ann.save(&out.join("annotation.json"))?;
    println!(
        "wrote phantom.json/.raw ({}x{}x{} voxels) and annotation.json ({} centers) to {}",
        vol.dims()[0],
        vol.dims()[1],
        vol.dims()[2],
        ann.len(),
        out.display()
    );
    Ok(())
}

fn cmd_render(mut cfg: RunConfig, out: &Path, k: Option<usize>) -> Result<()> {
    if let Some(k) = k {
        cfg.n_views = k;
    }
    cfg.validate()?;
    let (vol, ann) = load_run_input(&cfg)?;
    let vol = match cfg.resample_mm {
        Some(target) => vol.resample_isotropic(target)?,
        None => vol,
    };
    let views = make_views(cfg.n_views, cfg.sad_mm, cfg.sdd_mm, cfg.detector, vol.center())?;
    for g in &views {
        let img = render_drr(&vol, g, cfg.step_mm);
        img.save(&out.join(format!("view_{:03}", g.view_index)))?;
    }
    if let Some(ann) = &ann {
        let mut per_view = Vec::with_capacity(views.len());
        for g in &views {
            let mut points = Vec::with_capacity(ann.len());
            for e in ann.entries() {
                let (u, v) = g.project_point(&e.center())?;
                points.push(serde_json::json!({ "label": e.label.name(), "uv_mm": [u, v] }));
            }
            per_view.push(serde_json::json!({ "view": g.view_index, "points": points }));
        }
        write_text(&out.join("projections.json"), &pretty(&per_view))?;
    }
    println!("rendered {} views into {}", views.len(), out.display());
    Ok(())
}

fn cmd_run(
    mut cfg: RunConfig,
    out: &Path,
    k: Option<usize>,
    dump_dp: bool,
    dump_probmaps: bool,
) -> Result<()> {
    if let Some(k) = k {
        cfg.n_views = k;
    }
    let res = run_once(&cfg)?;

    write_text(&out.join("fused.json"), &pretty(&res.fusion.vertebrae))?;
    write_text(&out.join("eval.json"), &pretty(&res.eval))?;
    for (k, view) in res.views.iter().enumerate() {
        write_text(
            &out.join(format!("detections_{k:03}.json")),
            &detections_to_json(&view.dets),
        )?;
        if dump_probmaps {
            if let Some(pm) = &view.probmap {
                pm.save(&out.join(format!("probmap_{k:03}.json")))?;
            }
        }
    }
    if dump_dp {
        write_text(&out.join("dp.json"), &pretty(&res.fusion.dp))?;
    }
    if let Some(drrs) = &res.drrs {
        for img in drrs {
            img.save(&out.join(format!("view_{:03}", img.geometry.view_index)))?;
        }
    }

    if !res.fusion.anchored {
        eprintln!("warning: no consecutive label chain reached the last detection; falling back to per-row argmax labels");
    }
    for v in &res.fusion.vertebrae {
        println!(
            "{:<4} ({:9.3}, {:9.3}, {:9.3}) mm  support {}  residual {:.4}",
            v.label.name(),
            v.center_mm[0],
            v.center_mm[1],
            v.center_mm[2],
            v.support,
            v.residual
        );
    }
    println!(
        "id_rate {:.3}  l_error {:.3} mm  matched {}/{}  spurious {}",
        res.eval.id_rate, res.eval.l_error_mm, res.eval.matched, res.eval.total, res.eval.spurious
    );
    Ok(())
}

fn cmd_sweep(cfg: RunConfig, out: &Path, ks: &str, n_seeds: usize) -> Result<()> {
    let ks = ks
        .split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad view count {t:?} in --k")))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    let rows = sweep_k(&cfg, &ks, &seeds)?;
    write_text(&out.join("sweep.csv"), &rows_to_csv(&rows))?;
    for s in summarize(&rows) {
        println!(
            "K={:<3} runs={:<3} id_rate {:.3}  l_error {:.3} +/- {:.3} mm",
            s.k, s.runs, s.mean_id_rate, s.mean_l_error_mm, s.sd_l_error_mm
        );
    }
    Ok(())
}

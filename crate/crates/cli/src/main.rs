//! Command-line front end for the point-cloud transformer pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use pointplain::config::RunConfig;
use pointplain::error::{Error, Result};
use pointplain::geom::PointCloud;
use pointplain::io::{
    load_point_cloud, patch_colors, save_assignments, save_point_cloud, FileFormat,
};
use pointplain::mae::partition_patches;
use pointplain::patchify::{build_patches, gather_patches, Grouping, PatchSet};
use pointplain::rng::Rng;
use pointplain::synth::{synth_scene, SceneConfig};
use pointplain::tensor::Graph;
use pointplain::train::{build_model, pretrain_loop};

#[derive(Parser)]
#[command(
    name = "pointplain",
    version,
    about = "Plain transformers for point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Divide a point cloud into patches and emit a patch-colored cloud
    /// plus the assignment matrix.
    Patchify {
        /// Input cloud (.xyz or .ply).
        input: PathBuf,
        /// Number of patches (M).
        #[arg(long, default_value_t = 512)]
        patches: usize,
        /// Points per patch (K).
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Grouping strategy.
        #[arg(long, default_value = "fpc", value_parser = Grouping::parse)]
        group: Grouping,
        /// Ball-query radius in meters.
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
        /// Lloyd iterations for the k-means grouping.
        #[arg(long, default_value_t = 10)]
        kmeans_iters: usize,
        /// Color seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix: writes <out>.patches.ply and <out>.assign.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run masked-autoencoder pre-training from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.log and checkpoints.
        #[arg(long, default_value = "pretrain_out")]
        out: PathBuf,
    },
    /// Reconstruct masked patches with a trained model and emit
    /// original / masked / reconstructed clouds.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0.0)]
        drop_ratio: f64,
        /// Partition seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix: writes <out>.original.ply, <out>.masked.ply,
        /// <out>.reconstructed.ply.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full gradient-check suite; non-zero exit on any failure.
    Gradcheck,
    /// Patchifier throughput table on a synthetic scene.
    Bench {
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        #[arg(long, default_value_t = 512)]
        patches: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Patchify {
            input,
            patches,
            samples,
            group,
            radius,
            kmeans_iters,
            seed,
            out,
        } => patchify_cmd(
            &input,
            patches,
            samples,
            group,
            radius,
            kmeans_iters,
            seed,
            &out,
        ),
        Command::Pretrain { config, out } => pretrain_cmd(&config, &out),
        Command::Reconstruct {
            checkpoint,
            input,
            mask_ratio,
            drop_ratio,
            seed,
            out,
        } => reconstruct_cmd(&checkpoint, &input, mask_ratio, drop_ratio, seed, &out),
        Command::Gradcheck => gradcheck_cmd(),
        Command::Bench {
            points,
            patches,
            samples,
            radius,
            seed,
        } => bench_cmd(points, patches, samples, radius, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn patchify_cmd(
    input: &Path,
    patches: usize,
    samples: usize,
    group: Grouping,
    radius: f64,
    kmeans_iters: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let pc = load_point_cloud(input)?;
    let ps = build_patches(&pc, patches, samples, group, radius, kmeans_iters)?;
    let colored = pointplain::io::patch_colored_cloud(&pc, &ps, seed)?;
    let cloud_path = with_suffix(out, "patches.ply");
    let assign_path = with_suffix(out, "assign.txt");
    save_point_cloud(&colored, &cloud_path, FileFormat::Ply)?;
    save_assignments(&ps, &assign_path)?;
    println!(
        "{} points -> {} patches of {} ({}), wrote {} and {}",
        pc.len(),
        ps.num_patches(),
        ps.k,
        group.name(),
        cloud_path.display(),
        assign_path.display()
    );
    Ok(())
}

fn pretrain_cmd(config_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let cfg = RunConfig::parse(&text, &config_path.display().to_string())?;
    let report = pretrain_loop(&cfg, out)?;
    match (report.initial_loss, report.final_loss) {
        (Some(first), Some(last)) => println!(
            "{} steps, loss {first} -> {last}, metrics {}, checkpoint {}",
            report.steps,
            report.metrics_path.display(),
            report.checkpoint_path.display()
        ),
        _ => println!(
            "0 steps, wrote initialized checkpoint {}",
            report.checkpoint_path.display()
        ),
    }
    Ok(())
}

fn reconstruct_cmd(
    checkpoint: &Path,
    input: &Path,
    mask_ratio: f64,
    drop_ratio: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (store, config_text) = pointplain::checkpoint::load_checkpoint(checkpoint)?;
    let cfg = RunConfig::parse(
        &config_text,
        &format!("{} (embedded config)", checkpoint.display()),
    )?;
    // Rebuild the handle structure from the config; parameters come from the
    // checkpoint. Name sets must agree exactly.
    let (fresh, model) = build_model(&cfg)?;
    let fresh_names: Vec<&str> = fresh.iter().map(|(n, _)| n).collect();
    let loaded_names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    if fresh_names != loaded_names {
        return Err(Error::Checkpoint(format!(
            "{}: parameter names do not match the embedded config",
            checkpoint.display()
        )));
    }

    let pc = load_point_cloud(input)?;
    let ps = build_patches(
        &pc,
        cfg.patches,
        cfg.samples,
        cfg.group,
        cfg.radius,
        cfg.kmeans_iters,
    )?;
    let pt = gather_patches(&pc, &ps);
    let reserve = 1.0 - drop_ratio - mask_ratio;
    let mut rng = Rng::new(seed);
    let part = partition_patches(cfg.patches, (drop_ratio, mask_ratio, reserve), &mut rng)?;

    let mut graph = Graph::new();
    let rec = model.forward(&mut graph, &store, &pt, &part)?;
    let pred: Vec<f64> = match rec.pred {
        Some(v) => graph.value(v).data().to_vec(),
        None => Vec::new(),
    };

    let palette = patch_colors(ps.num_patches(), seed);
    let original = colored_patches(&pc, &ps, &palette, (0..ps.num_patches()).collect())?;
    let masked_view = colored_patches(&pc, &ps, &palette, part.reserved.clone())?;
    let reconstructed = reconstruction_cloud(&pc, &ps, &palette, &part, &pred)?;

    let paths = [
        (original, with_suffix(out, "original.ply")),
        (masked_view, with_suffix(out, "masked.ply")),
        (reconstructed, with_suffix(out, "reconstructed.ply")),
    ];
    for (cloud, path) in &paths {
        save_point_cloud(cloud, path, FileFormat::Ply)?;
    }
    println!(
        "wrote {}, {}, {}",
        paths[0].1.display(),
        paths[1].1.display(),
        paths[2].1.display()
    );
    Ok(())
}

/// The selected patches' original points, painted with their patch colors.
fn colored_patches(
    pc: &PointCloud,
    ps: &PatchSet,
    palette: &[[f64; 3]],
    patches: Vec<usize>,
) -> Result<PointCloud> {
    let mut coords = Vec::with_capacity(patches.len() * ps.k);
    let mut colors = Vec::with_capacity(patches.len() * ps.k * 3);
    for &m in &patches {
        for &i in ps.patch(m) {
            coords.push(pc.coords()[i]);
            colors.extend_from_slice(&palette[m]);
        }
    }
    PointCloud::new(coords)?.with_extras(3, colors)
}

/// Reserved patches keep their true points; masked patches appear as
/// predicted offsets re-anchored at their key points.
fn reconstruction_cloud(
    pc: &PointCloud,
    ps: &PatchSet,
    palette: &[[f64; 3]],
    part: &pointplain::mae::MaskPartition,
    pred: &[f64],
) -> Result<PointCloud> {
    let k = ps.k;
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    for &m in &part.reserved {
        for &i in ps.patch(m) {
            coords.push(pc.coords()[i]);
            colors.extend_from_slice(&palette[m]);
        }
    }
    for (mi, &m) in part.masked.iter().enumerate() {
        let key = ps.keys.coords[m];
        for j in 0..k {
            let at = (mi * k + j) * 3;
            coords.push([
                key[0] + pred[at],
                key[1] + pred[at + 1],
                key[2] + pred[at + 2],
            ]);
            colors.extend_from_slice(&palette[m]);
        }
    }
    PointCloud::new(coords)?.with_extras(3, colors)
}

fn gradcheck_cmd() -> Result<()> {
    let entries = pointplain::gradsuite::run_full_suite()?;
    let mut all_ok = true;
    for e in &entries {
        let status = if e.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {:<28} max relative error {:.3e}",
            e.name, e.max_rel_err
        );
        all_ok &= e.passed();
    }
    if all_ok {
        println!("gradcheck: all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(Error::invalid("gradient checks failed"))
    }
}

fn bench_cmd(points: usize, patches: usize, samples: usize, radius: f64, seed: u64) -> Result<()> {
    let scene_cfg = SceneConfig {
        n_points: points,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let pc = synth_scene(&mut rng, &scene_cfg)?;
    println!("patchifier throughput: {points} points -> {patches} patches x {samples} samples");
    println!("{:<8} {:>10} {:>14}", "group", "ms", "points/s");
    for group in [
        Grouping::Ball,
        Grouping::Knn,
        Grouping::Kmeans,
        Grouping::Fpc,
    ] {
        let start = Instant::now();
        let ps = build_patches(&pc, patches, samples, group, radius, 10)?;
        let elapsed = start.elapsed();
        let ms = elapsed.as_secs_f64() * 1e3;
        let throughput = points as f64 / elapsed.as_secs_f64();
        println!("{:<8} {:>10.2} {:>14.0}", group.name(), ms, throughput);
        std::hint::black_box(&ps);
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    if name.is_empty() {
        name = "out".into();
    }
    let mut s = name.into_string().unwrap_or_else(|_| "out".into());
    s.push('.');
    s.push_str(suffix);
    prefix.with_file_name(s)
}

//! Command-line surface: prune images and videos from serialized tensors,
//! plan budgets, compute cost reports, emit patch masks, and generate
//! synthetic fixtures.
//!
//! Every invocation is a pure function of (argv, input file bytes, config):
//! outputs are byte-stable, JSON keys are emitted sorted, and exit codes are
//! 0 (success), 2 (validation error), 3 (I/O error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dvts::{ClsAttention, LtamParams, TokenGrid, TokenSet};
use crate::efficiency::{
    kv_cache_bytes, kv_cache_mb, kv_cache_mib, layer_flops, reduction_ratio, CostProfile,
};
use crate::error::{Error, Result};
use crate::llm_stage::CrossModalAxis;
use crate::pipeline::{
    plan_budget, run_video, run_vision_stage, BudgetPlan, FrameSet, SelectionResult, StageOptions,
    TokenFate,
};
use crate::tensor::{row_softmax, Rng, Tensor};
use crate::tgvc::TextFeatures;

#[derive(Parser)]
#[command(name = "visiontrim", version, about = "Visual token compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune an image's visual tokens and emit the composed token matrix.
    Prune(PruneArgs),
    /// Compress video frames, then prune each kept frame.
    PruneVideo(PruneVideoArgs),
    /// Split a retention budget between dominant and complement tokens.
    Plan(PlanArgs),
    /// Analytical FLOPs / KV-cache cost report.
    Flops(FlopsArgs),
    /// Generate deterministic synthetic fixtures.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PruneArgs {
    /// Token features, VTTF rank-2 (N×d).
    #[arg(long)]
    features: PathBuf,
    /// Per-head \[CLS\] attention rows, VTTF rank-2 (H×N).
    #[arg(long = "cls-attn")]
    cls_attn: PathBuf,
    /// Text features, VTTF rank-2 (L×d).
    #[arg(long)]
    text: PathBuf,
    /// Grid layout as HxW, e.g. 24x24.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// Total tokens to retain (dominant + complement).
    #[arg(long)]
    retain: usize,
    /// Dominant-to-complement ratio as a:b.
    #[arg(long, value_parser = parse_ratio, default_value = "3:1")]
    ratio: (u32, u32),
    /// JSON config; values here override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output VTTF for the composed token matrix.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON selection report.
    #[arg(long = "indices-out")]
    indices_out: Option<PathBuf>,
    /// Optional PGM (P5) provenance mask.
    #[arg(long = "mask-out")]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneVideoArgs {
    /// Frame token features, VTTF rank-3 (F×N×d).
    #[arg(long)]
    frames: PathBuf,
    /// Per-frame \[CLS\] attention, VTTF rank-3 (F×H×N).
    #[arg(long)]
    attn: PathBuf,
    /// Text features, VTTF rank-2 (L×d).
    #[arg(long)]
    text: PathBuf,
    /// Grid layout per frame as HxW.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// Frames to keep as cluster centers (defaults to all frames).
    #[arg(long = "keep-frames")]
    keep_frames: Option<usize>,
    /// Tokens to retain per kept frame.
    #[arg(long)]
    retain: usize,
    /// Dominant-to-complement ratio as a:b.
    #[arg(long, value_parser = parse_ratio, default_value = "3:1")]
    ratio: (u32, u32),
    /// JSON config; values here override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output VTTF, rank-3 (keep_frames×retain×d).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    total: usize,
    #[arg(long)]
    retain: usize,
    #[arg(long, value_parser = parse_ratio, default_value = "3:1")]
    ratio: (u32, u32),
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    tokens: u64,
    #[arg(long)]
    hidden: u64,
    #[arg(long)]
    ffn: u64,
    #[arg(long)]
    layers: u64,
    /// Retention fraction γ in (0, 1].
    #[arg(long = "retain-fraction", default_value_t = 1.0)]
    retain_fraction: f64,
    #[arg(long = "kv-bytes-per-element", default_value_t = 2)]
    kv_bytes_per_element: u64,
    /// Also report binary mebibytes.
    #[arg(long)]
    mib: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 576)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long = "text-len", default_value_t = 8)]
    text_len: usize,
    /// Optional grid HxW; must cover the token count.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Emit a video fixture with this many frames instead of a single image.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn parse_grid(raw: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = raw
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{raw}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad grid height '{h}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad grid width '{w}'"))?;
    if h == 0 || w == 0 {
        return Err("grid dims must be positive".into());
    }
    Ok((h, w))
}

fn parse_ratio(raw: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = raw
        .split_once(':')
        .ok_or_else(|| format!("expected a:b, got '{raw}'"))?;
    let a: u32 = a.trim().parse().map_err(|_| format!("bad ratio part '{a}'"))?;
    let b: u32 = b.trim().parse().map_err(|_| format!("bad ratio part '{b}'"))?;
    if a == 0 || b == 0 {
        return Err("ratio parts must be positive".into());
    }
    Ok((a, b))
}

/// JSON run configuration. Unknown keys are rejected; present keys override
/// the corresponding command-line flags, which in turn override built-in
/// defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub retain: Option<usize>,
    pub ratio: Option<(u32, u32)>,
    pub stage1_retain: Option<usize>,
    pub kernel_size: Option<usize>,
    pub w1: Option<f32>,
    pub w2: Option<f32>,
    pub w3: Option<f32>,
    pub sigma_floor: Option<f32>,
    pub tgvc_iterations: Option<usize>,
    pub cross_modal_axis: Option<String>,
    pub swap_fusion_ratio: Option<bool>,
    pub seed: Option<u64>,
    pub vision_layer: Option<usize>,
    pub llm_layer: Option<usize>,
    pub keep_frames: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::validation(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved knobs, echoed into every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveConfig {
    pub retain: usize,
    pub ratio: (u32, u32),
    pub kernel_size: usize,
    pub w1: f32,
    pub w2: f32,
    pub w3: f32,
    pub sigma_floor: f32,
    pub tgvc_iterations: usize,
    pub cross_modal_axis: String,
    pub swap_fusion_ratio: bool,
    pub seed: u64,
    pub vision_layer: usize,
    pub llm_layer: usize,
}

impl EffectiveConfig {
    fn resolve(retain: usize, ratio: (u32, u32), config: &RunConfig) -> Result<Self> {
        let defaults = LtamParams::default();
        let axis = config.cross_modal_axis.clone().unwrap_or_else(|| "text".into());
        if axis != "text" && axis != "visual" {
            return Err(Error::validation(format!(
                "cross_modal_axis must be 'text' or 'visual', got '{axis}'"
            )));
        }
        Ok(EffectiveConfig {
            retain: config.retain.unwrap_or(retain),
            ratio: config.ratio.unwrap_or(ratio),
            kernel_size: config.kernel_size.unwrap_or(defaults.kernel_size),
            w1: config.w1.unwrap_or(defaults.w1),
            w2: config.w2.unwrap_or(defaults.w2),
            w3: config.w3.unwrap_or(defaults.w3),
            sigma_floor: config.sigma_floor.unwrap_or(defaults.sigma_floor),
            tgvc_iterations: config.tgvc_iterations.unwrap_or(1),
            cross_modal_axis: axis,
            swap_fusion_ratio: config.swap_fusion_ratio.unwrap_or(false),
            seed: config.seed.unwrap_or(0),
            vision_layer: config.vision_layer.unwrap_or(23),
            llm_layer: config.llm_layer.unwrap_or(2),
        })
    }

    fn ltam(&self) -> LtamParams {
        LtamParams {
            kernel_size: self.kernel_size,
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            sigma_floor: self.sigma_floor,
        }
    }

    fn stage_options(&self) -> StageOptions {
        StageOptions {
            swap_fusion_ratio: self.swap_fusion_ratio,
            cross_modal_axis: if self.cross_modal_axis == "visual" {
                CrossModalAxis::Visual
            } else {
                CrossModalAxis::Text
            },
            stage2_ltam: true,
        }
    }

    fn plan(&self, total: usize) -> Result<BudgetPlan> {
        if self.tgvc_iterations == 0 {
            return Err(Error::validation("tgvc_iterations must be positive"));
        }
        let mut plan = BudgetPlan::single_stage(total, self.retain, self.ratio)?;
        plan.ltam = self.ltam();
        plan.ltam.validate()?;
        plan.tgvc_iterations = self.tgvc_iterations;
        plan.vision_layer = self.vision_layer;
        plan.llm_layer = self.llm_layer;
        Ok(plan)
    }
}

/// Binary entry point; parses argv and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prune(args) => cmd_prune(&args),
        Command::PruneVideo(args) => cmd_prune_video(&args),
        Command::Plan(args) => cmd_plan(&args),
        Command::Flops(args) => cmd_flops(&args),
        Command::Synth(args) => cmd_synth(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_matrix(path: &Path, what: &str) -> Result<Tensor> {
    let t = Tensor::load(path).map_err(|e| annotate(e, path))?;
    if t.rank() != 2 {
        return Err(Error::validation(format!(
            "{what} {} must be rank-2, got rank {}",
            path.display(),
            t.rank()
        )));
    }
    Ok(t)
}

fn load_stack(path: &Path, what: &str) -> Result<Tensor> {
    let t = Tensor::load(path).map_err(|e| annotate(e, path))?;
    if t.rank() != 3 {
        return Err(Error::validation(format!(
            "{what} {} must be rank-3, got rank {}",
            path.display(),
            t.rank()
        )));
    }
    Ok(t)
}

/// Attach the file name to format errors so the message names the culprit.
fn annotate(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { .. } | Error::Validation(_) => err,
        other => Error::validation(format!("{}: {other}", path.display())),
    }
}

fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let features = load_matrix(&args.features, "features")?;
    let attn_rows = load_matrix(&args.cls_attn, "cls attention")?;
    let text_rows = load_matrix(&args.text, "text features")?;
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let effective = EffectiveConfig::resolve(args.retain, args.ratio, &config)?;

    let grid = TokenGrid::new(args.grid.0, args.grid.1)?;
    let tokens = TokenSet::new(features)?;
    let attn = ClsAttention::new(attn_rows)?;
    let text = TextFeatures::new(text_rows)?;
    let plan = effective.plan(tokens.len())?;
    let result = run_vision_stage(&tokens, &attn, &grid, &text, &plan, &effective.stage_options())?;

    result.final_tokens.save(&args.out)?;
    if let Some(path) = &args.indices_out {
        let report = selection_report(&result, &effective);
        write_sorted_json(path, &report)?;
    }
    if let Some(path) = &args.mask_out {
        write_mask(path, &result, &grid)?;
    }
    Ok(())
}

fn cmd_prune_video(args: &PruneVideoArgs) -> Result<()> {
    let frames_stack = load_stack(&args.frames, "frame features")?;
    let attn_stack = load_stack(&args.attn, "frame attention")?;
    let text_rows = load_matrix(&args.text, "text features")?;
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let effective = EffectiveConfig::resolve(args.retain, args.ratio, &config)?;

    let frames = FrameSet::from_tensor(&frames_stack)?;
    let f = frames.frame_count();
    if attn_stack.dims()[0] != f {
        return Err(Error::validation(format!(
            "attention stack has {} frames, features have {f}",
            attn_stack.dims()[0]
        )));
    }
    let (heads, n) = (attn_stack.dims()[1], attn_stack.dims()[2]);
    let attns: Vec<ClsAttention> = (0..f)
        .map(|i| ClsAttention::new(Tensor::matrix(heads, n, attn_stack.slice2(i).to_vec())?))
        .collect::<Result<Vec<_>>>()?;

    let keep = config.keep_frames.or(args.keep_frames).unwrap_or(f);
    let grid = TokenGrid::new(args.grid.0, args.grid.1)?;
    let text = TextFeatures::new(text_rows)?;
    let plan = effective.plan(frames.tokens_per_frame())?;
    let results = run_video(&frames, &attns, &grid, &text, keep, &plan, &effective.stage_options())?;

    let d = frames.dim();
    let per_frame = results[0].retained();
    let mut data = Vec::with_capacity(results.len() * per_frame * d);
    for r in &results {
        data.extend_from_slice(r.final_tokens.data());
    }
    Tensor::new(vec![results.len(), per_frame, d], data)?.save(&args.out)?;

    if let Some(path) = &args.report {
        let report = VideoReport {
            config: effective.clone(),
            frames_in: f,
            frames_kept: results.len(),
            tokens_per_frame: per_frame,
            total_tokens: results.len() * per_frame,
            alpha: results.iter().map(|r| r.alpha.unwrap_or(f32::NAN)).collect(),
        };
        write_sorted_json(path, &report)?;
    }
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let (k, r) = plan_budget(args.total, args.retain, args.ratio)?;
    println!("{}", sorted_json(&serde_json::json!({ "K": k, "R": r }))?);
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let profile = CostProfile {
        tokens: args.tokens,
        hidden: args.hidden,
        ffn: args.ffn,
        layers: args.layers,
        kv_bytes_per_element: args.kv_bytes_per_element,
        retention: args.retain_fraction,
    };
    profile.validate()?;
    let baseline = layer_flops(&profile);
    let reduction = reduction_ratio(&profile)?;
    let mut report = serde_json::json!({
        "flops_baseline": baseline,
        "flops_total": baseline * (1.0 - reduction),
        "reduction_ratio": reduction,
        "kv_bytes": kv_cache_bytes(&profile),
        "kv_mb": kv_cache_mb(&profile),
        "inputs": {
            "tokens": args.tokens,
            "hidden": args.hidden,
            "ffn": args.ffn,
            "layers": args.layers,
            "retain_fraction": args.retain_fraction,
            "kv_bytes_per_element": args.kv_bytes_per_element,
        },
    });
    if args.mib {
        report["kv_mib"] = serde_json::json!(kv_cache_mib(&profile));
    }
    println!("{}", sorted_json(&report)?);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if let Some((h, w)) = args.grid {
        if h * w != args.tokens {
            return Err(Error::validation(format!(
                "grid {h}x{w} does not cover {} tokens",
                args.tokens
            )));
        }
    }
    if args.tokens == 0 || args.dim == 0 || args.heads == 0 || args.text_len == 0 {
        return Err(Error::validation("fixture dimensions must be positive"));
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut rng = Rng::new(args.seed);
    let (n, d) = (args.tokens, args.dim);

    // Draw order is part of the fixture contract: features (or frame stack),
    // then attention noise, then text.
    match args.frames {
        None => {
            let features = rng.matrix(n, d, -1.0, 1.0);
            let attn = synth_attention(&mut rng, args.heads, n)?;
            let text = rng.matrix(args.text_len, d, -1.0, 1.0);
            features.save(args.out_dir.join("features.vttf"))?;
            attn.save(args.out_dir.join("cls_attn.vttf"))?;
            text.save(args.out_dir.join("text.vttf"))?;
        }
        Some(frames) => {
            if frames == 0 {
                return Err(Error::validation("frame count must be positive"));
            }
            let mut frame_data = Vec::with_capacity(frames * n * d);
            for _ in 0..frames {
                frame_data.extend((0..n * d).map(|_| rng.next_range(-1.0, 1.0)));
            }
            let stack = Tensor::new(vec![frames, n, d], frame_data)?;
            let mut attn_data = Vec::with_capacity(frames * args.heads * n);
            for _ in 0..frames {
                attn_data.extend_from_slice(synth_attention(&mut rng, args.heads, n)?.data());
            }
            let attn = Tensor::new(vec![frames, args.heads, n], attn_data)?;
            let text = rng.matrix(args.text_len, d, -1.0, 1.0);
            stack.save(args.out_dir.join("frames.vttf"))?;
            attn.save(args.out_dir.join("cls_attn.vttf"))?;
            text.save(args.out_dir.join("text.vttf"))?;
        }
    }
    Ok(())
}

fn synth_attention(rng: &mut Rng, heads: usize, n: usize) -> Result<Tensor> {
    let noise = rng.matrix(heads, n, -2.0, 2.0);
    row_softmax(&noise)
}

#[derive(Serialize)]
struct SelectionReport {
    alpha: f32,
    center_indices: Vec<usize>,
    config: EffectiveConfig,
    dominant_indices: Vec<usize>,
    fate: Vec<String>,
    provenance: Vec<&'static str>,
    retained: usize,
    scores: Vec<f32>,
    survivor_origin: Vec<usize>,
}

#[derive(Serialize)]
struct VideoReport {
    alpha: Vec<f32>,
    config: EffectiveConfig,
    frames_in: usize,
    frames_kept: usize,
    tokens_per_frame: usize,
    total_tokens: usize,
}

fn selection_report(result: &SelectionResult, config: &EffectiveConfig) -> SelectionReport {
    SelectionReport {
        alpha: result.alpha.unwrap_or(f32::NAN),
        center_indices: result.center_indices.clone(),
        config: config.clone(),
        dominant_indices: result.dominant_indices.clone(),
        fate: result
            .fate
            .iter()
            .map(|f| match f {
                TokenFate::Dominant => "dominant".to_string(),
                TokenFate::Center(j) => format!("center:{j}"),
                TokenFate::Merged(j) => format!("merged:{j}"),
                TokenFate::Dropped => "dropped".to_string(),
            })
            .collect(),
        provenance: result.provenance.iter().map(|p| p.as_str()).collect(),
        retained: result.retained(),
        scores: result.fused_scores.clone(),
        survivor_origin: result.survivor_origin.clone(),
    }
}

/// Serialize with sorted keys (serde_json's map is a BTreeMap, so routing
/// through `Value` sorts object keys) plus a trailing newline.
fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::validation(format!("serialization failed: {e}")))?;
    serde_json::to_string_pretty(&v)
        .map_err(|e| Error::validation(format!("serialization failed: {e}")))
}

fn write_sorted_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = sorted_json(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Three-level provenance mask as a binary PGM (P5): dominant 255, tokens
/// feeding a complement (centers and merged members) 128, dropped 0.
fn write_mask(path: &Path, result: &SelectionResult, grid: &TokenGrid) -> Result<()> {
    let (h, w) = (grid.height(), grid.width());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for fate in &result.fate {
        bytes.push(match fate {
            TokenFate::Dominant => 255,
            TokenFate::Center(_) | TokenFate::Merged(_) => 128,
            TokenFate::Dropped => 0,
        });
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

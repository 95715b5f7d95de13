use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tilestream::spd::Enhancer;
use tilestream::synth::synth_slide;
use tilestream::{
    Codec, CompositorConfig, Container, Engine, EngineConfig, FrameLoop, FrameLoopConfig, Framebuffer, MipParams, Pattern, SynthSpec,
    TileAddress, TileSource,
};
use tilestream_gateway::{encode_png, Gateway, GatewayConfig, DEFAULT_PORT, DEFAULT_STREAM_HZ};
use tilestream_harness::bench::{run_bench, summarize_bench, write_outputs, BenchConfig};
use tilestream_harness::report::{load_run, render_table, write_plot_data};
use tilestream_harness::trace::{trace_gen, Trace, TraceSpec, TraceStyle};

#[derive(Parser)]
#[command(name = "tilestream", version, about = "Whole-slide tile-streaming engine: slide synthesis, benchmarks and live serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic slide container.
    Synth(SynthArgs),
    /// Generate a navigation trace.
    TraceGen(TraceGenArgs),
    /// Play a trace headless and record metrics.
    Bench(BenchArgs),
    /// Summarize bench output as a median [25th, 75th] table.
    Report(ReportArgs),
    /// Serve a slide to the browser viewer.
    Serve(ServeArgs),
    /// Write enhancement kernels and the mip chain of one tile for inspection.
    DumpKernels(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Checker,
    Disks,
    GradientText,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Raw,
    Deflate,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Saccade,
    Pan,
    Mixed,
}

#[derive(Args)]
struct SynthArgs {
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Layer-0 width in pixels.
    #[arg(long, default_value_t = 4096)]
    width: u32,
    /// Layer-0 height in pixels.
    #[arg(long, default_value_t = 4096)]
    height: u32,
    /// Comma-separated downsample factor per layer, starting at 1.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    downsamples: Vec<f64>,
    #[arg(long, value_enum, default_value_t = PatternArg::Mixed)]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value_t = CodecArg::Raw)]
    codec: CodecArg,
}

#[derive(Args)]
struct TraceGenArgs {
    /// Output trace path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 12_000)]
    duration_ms: u64,
    #[arg(long, value_enum, default_value_t = StyleArg::Saccade)]
    style: StyleArg,
    /// Slide whose extent bounds the trace; alternative to --slide-size.
    #[arg(long, conflicts_with = "slide_size")]
    slide: Option<PathBuf>,
    /// Slide extent as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    slide_size: Option<(u32, u32)>,
    /// Screen as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size, default_value = "2774x1750")]
    screen: (u32, u32),
    /// Screen pixels per layer-0 pixel.
    #[arg(long, default_value_t = 0.25)]
    zoom: f64,
}

#[derive(Args, Clone, Copy)]
struct EngineArgs {
    /// Buffering perimeter radius in tiles around the field of view.
    #[arg(long, default_value_t = tilestream::rtbs::DEFAULT_RADIUS)]
    radius: u32,
    /// Tiles per microtransaction.
    #[arg(long, default_value_t = tilestream::rtbs::DEFAULT_TXN_TILES)]
    txn_tiles: usize,
    /// Slot pool size [default: sized from the screen and radius].
    #[arg(long)]
    pool_size: Option<usize>,
    /// Decoded-tile cache budget in MiB.
    #[arg(long, default_value_t = 512)]
    cache_budget_mb: usize,
    /// Base kernel width of the first mip level.
    #[arg(long, default_value_t = 1.0)]
    sigma_base: f64,
    /// Sharpening weight.
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Mip levels generated per tile.
    #[arg(long, default_value_t = 3)]
    mip_levels: u32,
    /// Tile decode threads [default: hardware threads minus two, at least two].
    #[arg(long)]
    loader_workers: Option<usize>,
    /// Buffering executor threads [default: half the hardware threads, at least one].
    #[arg(long)]
    executors: Option<usize>,
}

impl EngineArgs {
    fn config(&self) -> EngineConfig {
        let d = EngineConfig::default();
        EngineConfig {
            radius: self.radius,
            txn_tiles: self.txn_tiles,
            pool_size: self.pool_size,
            mip: MipParams {
                sigma_base: self.sigma_base,
                beta: self.beta,
                levels: self.mip_levels,
            },
            loader_workers: self.loader_workers.unwrap_or(d.loader_workers),
            cache_budget: self.cache_budget_mb * 1024 * 1024,
            executors: self.executors.unwrap_or(d.executors),
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Slide container.
    #[arg(long)]
    slide: PathBuf,
    /// Trace file from trace-gen.
    #[arg(long)]
    trace: PathBuf,
    /// Output directory for frames.csv, events.csv and summary.json.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Render loop rate.
    #[arg(long, default_value_t = 120)]
    target_hz: u32,
    /// One loader, one executor, serial compositing.
    #[arg(long)]
    single_thread: bool,
    /// Play commands strictly on schedule instead of letting each field
    /// finish before jumping to the next.
    #[arg(long)]
    no_settle: bool,
    /// Skip the render loop; no frame samples are recorded.
    #[arg(long)]
    no_render: bool,
    /// Write the last rendered frame as PNG.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Bench output directories or CSV files; one column each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write plot series (value and log10 value) here.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Slide container.
    #[arg(long)]
    slide: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Bind address.
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Frames per second sent to the client.
    #[arg(long, default_value_t = DEFAULT_STREAM_HZ)]
    stream_hz: u32,
    /// Render loop rate.
    #[arg(long, default_value_t = 120)]
    target_hz: u32,
    /// Rendered frame size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size, default_value = "1280x800")]
    screen: (u32, u32),
    /// Viewer assets directory [default: built-in page].
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct DumpArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma_base: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 3)]
    mip_levels: u32,
    /// Slide to take the sample tile from [default: a synthetic checker tile].
    #[arg(long)]
    slide: Option<PathBuf>,
    /// Sample tile as LAYER,COL,ROW.
    #[arg(long, value_delimiter = ',', default_value = "0,0,0")]
    tile: Vec<u32>,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((w, h))
}

fn open_slide(path: &Path) -> Result<Arc<dyn TileSource>> {
    let c = Container::open(path).with_context(|| format!("opening slide {}", path.display()))?;
    Ok(Arc::new(c))
}

fn write_png(path: &Path, fb: &Framebuffer) -> Result<()> {
    std::fs::write(path, encode_png(fb)).with_context(|| format!("writing {}", path.display()))
}

fn image(width: u32, height: u32, pixels: Vec<u8>) -> Framebuffer {
    Framebuffer {
        width,
        height,
        pixels,
        frame_index: 0,
        started_at: Default::default(),
        finished_at: Default::default(),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let pattern = match a.pattern {
        PatternArg::Checker => Pattern::Checker,
        PatternArg::Disks => Pattern::Disks,
        PatternArg::GradientText => Pattern::GradientText,
        PatternArg::Mixed => Pattern::Mixed,
    };
    let codec = match a.codec {
        CodecArg::Raw => Codec::Raw,
        CodecArg::Deflate => Codec::Deflate,
    };
    let spec = SynthSpec::new(a.seed, a.width, a.height, a.downsamples, pattern).with_codec(codec);
    synth_slide(&spec, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let size = std::fs::metadata(&a.out)?.len();
    println!("wrote {} ({} bytes)", a.out.display(), size);
    Ok(())
}

fn trace_gen_cmd(a: TraceGenArgs) -> Result<()> {
    let slide = match (a.slide, a.slide_size) {
        (Some(p), _) => {
            let s = open_slide(&p)?;
            let l0 = s.pyramid().layers()[0];
            (l0.width_px, l0.height_px)
        }
        (None, Some(size)) => size,
        (None, None) => bail!("give --slide or --slide-size"),
    };
    let style = match a.style {
        StyleArg::Saccade => TraceStyle::Saccade,
        StyleArg::Pan => TraceStyle::Pan,
        StyleArg::Mixed => TraceStyle::Mixed,
    };
    let trace = trace_gen(TraceSpec {
        seed: a.seed,
        duration_ms: a.duration_ms,
        style,
        slide,
        screen: a.screen,
        zoom: a.zoom,
    })?;
    trace.save(&a.out)?;
    println!(
        "wrote {} ({} commands, {} jumps)",
        a.out.display(),
        trace.commands.len(),
        trace.jumps()
    );
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<ExitCode> {
    let source = open_slide(&a.slide)?;
    let trace = Trace::load(&a.trace)?;
    let l0 = source.pyramid().layers()[0];
    if (l0.width_px, l0.height_px) != (trace.slide_width, trace.slide_height) {
        eprintln!(
            "warning: trace was generated for a {}x{} slide, this one is {}x{}",
            trace.slide_width, trace.slide_height, l0.width_px, l0.height_px
        );
    }
    let mut config = BenchConfig {
        engine: a.engine.config(),
        target_hz: a.target_hz,
        compositor: CompositorConfig::default(),
        settle: !a.no_settle,
        render: !a.no_render,
        ..Default::default()
    };
    if a.single_thread {
        config = config.single_thread();
    }
    let result = run_bench(source, &trace, &config)?;
    let summary = summarize_bench(&result, &trace, &config);
    write_outputs(&a.out, &result, &summary)?;
    if let Some(path) = &a.snapshot {
        match &result.last_frame {
            Some(fb) => write_png(path, fb)?,
            None => eprintln!("warning: no frame rendered, snapshot not written"),
        }
    }
    let run = load_run(&a.out)?;
    print!("{}", render_table(std::slice::from_ref(&run)));
    println!("wrote {}", a.out.display());
    for c in &result.invariants {
        println!("{} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if result.healthy() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let runs = a.inputs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
    print!("{}", render_table(&runs));
    if let Some(dir) = &a.plot_dir {
        let files = write_plot_data(dir, &runs)?;
        println!("wrote {} plot series to {}", files.len(), dir.display());
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let source = open_slide(&a.slide)?;
    let engine = Arc::new(Engine::start(source, a.engine.config(), a.screen)?);
    let frames = FrameLoop::start(
        engine.clone(),
        FrameLoopConfig {
            target_hz: a.target_hz,
            compositor: CompositorConfig::default(),
        },
    );
    let gateway = Gateway::start(
        engine.clone(),
        frames.mailbox().clone(),
        GatewayConfig {
            addr: SocketAddr::new(a.host, a.port),
            stream_hz: a.stream_hz,
            static_dir: a.static_dir,
        },
    )?;
    println!("serving on http://{}/ (Ctrl-C to stop)", gateway.local_addr());
    loop {
        std::thread::park();
    }
}

fn dump_kernels(a: DumpArgs) -> Result<()> {
    let params = MipParams {
        sigma_base: a.sigma_base,
        beta: a.beta,
        levels: a.mip_levels,
    };
    let enhancer = Enhancer::new(params)?;
    std::fs::create_dir_all(&a.out)?;
    for k in enhancer.kernels() {
        let path = a.out.join(format!("kernel_{}.csv", k.level));
        let r = k.radius as i32;
        let mut text = String::new();
        for v in -r..=r {
            let row: Vec<String> = (-r..=r).map(|u| format!("{:.12e}", k.at(u, v))).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        // Signed coefficients mapped to grey around 128.
        let peak = k.coeffs.iter().fold(0f64, |m, c| m.max(c.abs())).max(f64::MIN_POSITIVE);
        let w = k.width() as u32;
        let pixels = k
            .coeffs
            .iter()
            .flat_map(|c| {
                let g = (128.0 + 127.0 * c / peak).round() as u8;
                [g, g, g, 255]
            })
            .collect();
        write_png(&a.out.join(format!("kernel_{}.png", k.level)), &image(w, w, pixels))?;
        println!("level {}: sigma {:.3}, radius {}, sum {:.15}", k.level, k.sigma, k.radius, k.sum());
    }
    let tile = match (&a.slide, a.tile.as_slice()) {
        (Some(p), &[layer, col, row]) => open_slide(p)?.load(TileAddress::new(layer, col, row))?,
        (Some(_), _) => bail!("--tile takes LAYER,COL,ROW"),
        (None, _) => {
            let spec = SynthSpec::new(1, 1024, 1024, vec![1.0], Pattern::Checker);
            tilestream::SyntheticSource::new(&spec)?.load(TileAddress::new(0, 0, 0))?
        }
    };
    let edge = tilestream::TILE_EDGE;
    write_png(&a.out.join("mip_0.png"), &image(edge, edge, tile.clone()))?;
    for (i, level) in enhancer.generate_mips(&tile).levels.into_iter().enumerate() {
        write_png(&a.out.join(format!("mip_{}.png", i + 1)), &image(level.edge, level.edge, level.pixels))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::TraceGen(a) => trace_gen_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => bench_cmd(a),
        Command::Report(a) => report_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Serve(a) => serve_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::DumpKernels(a) => dump_kernels(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

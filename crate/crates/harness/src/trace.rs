//! Navigation traces: timed viewport commands, generated from a seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tilestream::pyramid::fov_overlap;
use tilestream::Viewport;

pub const TRACE_VERSION: u32 = 1;

/// Interval between drag updates in pan segments.
const DRAG_STEP_MS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOp {
    SetViewport,
    /// Zoom about the current view center.
    SetZoom,
    JumpNewField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceCommand {
    pub t_ms: u64,
    pub op: TraceOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStyle {
    Saccade,
    Pan,
    Mixed,
}

impl FromStr for TraceStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "saccade" => Ok(Self::Saccade),
            "pan" => Ok(Self::Pan),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown trace style {other:?} (saccade, pan, mixed)")),
        }
    }
}

impl fmt::Display for TraceStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Saccade => "saccade",
            Self::Pan => "pan",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub version: u32,
    pub seed: u64,
    pub style: TraceStyle,
    pub duration_ms: u64,
    pub slide_width: u32,
    pub slide_height: u32,
    pub screen_width: u32,
    pub screen_height: u32,
    pub commands: Vec<TraceCommand>,
}

/// The viewport a trace has steered to so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewState {
    pub x: f64,
    pub y: f64,
    pub zoom: f64,
}

impl ViewState {
    pub fn apply(&self, cmd: &TraceCommand, screen: (u32, u32)) -> ViewState {
        let mut next = *self;
        match cmd.op {
            TraceOp::SetViewport | TraceOp::JumpNewField => {
                next.x = cmd.x.unwrap_or(self.x);
                next.y = cmd.y.unwrap_or(self.y);
                next.zoom = cmd.zoom.unwrap_or(self.zoom);
            }
            TraceOp::SetZoom => {
                let z = cmd.zoom.unwrap_or(self.zoom);
                let cx = self.x + screen.0 as f64 / (2.0 * self.zoom);
                let cy = self.y + screen.1 as f64 / (2.0 * self.zoom);
                next.x = cx - screen.0 as f64 / (2.0 * z);
                next.y = cy - screen.1 as f64 / (2.0 * z);
                next.zoom = z;
            }
        }
        next
    }

    pub fn viewport(&self, screen: (u32, u32)) -> Viewport {
        Viewport::new(self.x, self.y, screen.0, screen.1, self.zoom)
    }
}

impl Trace {
    pub fn screen(&self) -> (u32, u32) {
        (self.screen_width, self.screen_height)
    }

    /// Viewports after each command, in order.
    pub fn viewports(&self) -> Vec<Viewport> {
        let mut state = ViewState { x: 0.0, y: 0.0, zoom: 1.0 };
        self.commands
            .iter()
            .map(|c| {
                state = state.apply(c, self.screen());
                state.viewport(self.screen())
            })
            .collect()
    }

    /// Number of commands that move to a field disjoint from the previous
    /// one; the first placement counts.
    pub fn new_fields(&self) -> usize {
        let vps = self.viewports();
        (0..vps.len()).filter(|&i| i == 0 || !fov_overlap(&vps[i - 1], &vps[i])).count()
    }

    pub fn jumps(&self) -> usize {
        self.commands.iter().filter(|c| c.op == TraceOp::JumpNewField).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            bail!("trace version {} is not supported (expected {TRACE_VERSION})", self.version);
        }
        if self.screen_width == 0 || self.screen_height == 0 {
            bail!("trace screen size is zero");
        }
        if self.commands.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
            bail!("trace command times decrease");
        }
        let vps = self.viewports();
        for (i, (c, vp)) in self.commands.iter().zip(&vps).enumerate() {
            if !vp.is_valid() {
                bail!("command {i} yields an invalid viewport");
            }
            if c.op == TraceOp::JumpNewField && i > 0 && fov_overlap(&vps[i - 1], vp) {
                bail!("jump at command {i} overlaps the previous field");
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
        let trace: Trace = serde_json::from_str(&text).with_context(|| format!("parsing trace {}", path.display()))?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing trace {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSpec {
    pub seed: u64,
    pub duration_ms: u64,
    pub style: TraceStyle,
    pub slide: (u32, u32),
    pub screen: (u32, u32),
    pub zoom: f64,
}

struct Gen {
    rng: ChaCha8Rng,
    spec: TraceSpec,
    state: ViewState,
    t: u64,
    commands: Vec<TraceCommand>,
}

impl Gen {
    fn field(&self, zoom: f64) -> (f64, f64) {
        (self.spec.screen.0 as f64 / zoom, self.spec.screen.1 as f64 / zoom)
    }

    fn random_origin(&mut self, zoom: f64) -> (f64, f64) {
        let (fw, fh) = self.field(zoom);
        let max_x = (self.spec.slide.0 as f64 - fw).max(0.0);
        let max_y = (self.spec.slide.1 as f64 - fh).max(0.0);
        (self.rng.gen_range(0.0..=max_x).floor(), self.rng.gen_range(0.0..=max_y).floor())
    }

    fn push(&mut self, op: TraceOp, x: Option<f64>, y: Option<f64>, zoom: Option<f64>) {
        let cmd = TraceCommand { t_ms: self.t, op, x, y, zoom };
        self.state = self.state.apply(&cmd, self.spec.screen);
        self.commands.push(cmd);
    }

    fn jump(&mut self) -> Result<()> {
        let current = self.state.viewport(self.spec.screen);
        for _ in 0..10_000 {
            let (x, y) = self.random_origin(self.state.zoom);
            let next = Viewport::new(x, y, self.spec.screen.0, self.spec.screen.1, self.state.zoom);
            if !fov_overlap(&current, &next) {
                self.push(TraceOp::JumpNewField, Some(x), Some(y), None);
                return Ok(());
            }
        }
        bail!("slide is too small for disjoint fields at zoom {}", self.state.zoom)
    }

    /// Continuous drag for `span_ms`, bouncing off the slide edges.
    fn drag(&mut self, span_ms: u64) {
        let (fw, fh) = self.field(self.state.zoom);
        let speed = self.rng.gen_range(0.3..1.5) * fw / 1000.0;
        let angle: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
        let end = self.t + span_ms;
        let max_x = (self.spec.slide.0 as f64 - fw).max(0.0);
        let max_y = (self.spec.slide.1 as f64 - fh).max(0.0);
        while self.t + DRAG_STEP_MS <= end {
            self.t += DRAG_STEP_MS;
            let mut x = self.state.x + vx * DRAG_STEP_MS as f64;
            let mut y = self.state.y + vy * DRAG_STEP_MS as f64;
            if !(0.0..=max_x).contains(&x) {
                vx = -vx;
                x = x.clamp(0.0, max_x);
            }
            if !(0.0..=max_y).contains(&y) {
                vy = -vy;
                y = y.clamp(0.0, max_y);
            }
            self.push(TraceOp::SetViewport, Some(x.round()), Some(y.round()), None);
        }
    }

    fn rezoom(&mut self) {
        let base = self.spec.zoom;
        let z = (self.state.zoom * 2f64.powf(self.rng.gen_range(-1.0..1.0))).clamp(base / 8.0, base * 2.0);
        self.push(TraceOp::SetZoom, None, None, Some(z));
    }
}

/// Generates a deterministic trace. Saccade traces jump between disjoint
/// fields every 300 to 800 ms; pan traces drag continuously; mixed traces
/// interleave jumps, drags and zoom changes.
pub fn trace_gen(spec: TraceSpec) -> Result<Trace> {
    if spec.slide.0 == 0 || spec.slide.1 == 0 || spec.screen.0 == 0 || spec.screen.1 == 0 {
        bail!("slide and screen sizes must be positive");
    }
    if !(spec.zoom.is_finite() && spec.zoom > 0.0) {
        bail!("zoom must be positive");
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        spec,
        state: ViewState { x: 0.0, y: 0.0, zoom: spec.zoom },
        t: 0,
        commands: Vec::new(),
    };
    let (x, y) = g.random_origin(spec.zoom);
    g.push(TraceOp::SetViewport, Some(x), Some(y), Some(spec.zoom));
    loop {
        match spec.style {
            TraceStyle::Saccade => {
                g.t += g.rng.gen_range(300..=800);
                if g.t > spec.duration_ms {
                    break;
                }
                g.jump()?;
            }
            TraceStyle::Pan => {
                let span = g.rng.gen_range(500..=1500).min(spec.duration_ms.saturating_sub(g.t));
                if span < DRAG_STEP_MS {
                    break;
                }
                g.drag(span);
            }
            TraceStyle::Mixed => {
                let gap = g.rng.gen_range(300..=800);
                if g.t + gap > spec.duration_ms {
                    break;
                }
                match g.rng.gen_range(0..3) {
                    0 => {
                        g.t += gap;
                        g.jump()?;
                    }
                    1 => g.drag(gap),
                    _ => {
                        g.t += gap;
                        g.rezoom();
                    }
                }
            }
        }
    }
    let trace = Trace {
        version: TRACE_VERSION,
        seed: spec.seed,
        style: spec.style,
        duration_ms: spec.duration_ms,
        slide_width: spec.slide.0,
        slide_height: spec.slide.1,
        screen_width: spec.screen.0,
        screen_height: spec.screen.1,
        commands: g.commands,
    };
    trace.validate()?;
    Ok(trace)
}

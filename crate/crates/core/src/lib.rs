//! Tile-streaming engine for gigapixel whole-slide images.
//!
//! A slide is stored as a tiled multi-resolution [`container`]. A scheduler
//! ([`rtbs`]) keeps the tiles around the current viewport resident in a
//! fixed pool of device slots ([`device`]), enhancing each one with a
//! multi-scale kernel ([`spd`]) as it is buffered, while the [`compositor`]
//! renders frames from whatever is resident.

pub mod cache;
pub mod clock;
pub mod compositor;
pub mod container;
pub mod device;
pub mod metrics;
pub mod pyramid;
pub mod session;
pub mod rtbs;
pub mod signal;
pub mod source;
pub mod spd;
pub mod synth;

pub use cache::{CacheEntry, LoaderConfig, Priority, TileLoader};
pub use clock::{Clock, Timestamp};
pub use compositor::{CompositorConfig, Framebuffer, FramePacer, RenderStats};
pub use container::{Codec, Container, ContainerError, ContainerWriter};
pub use device::{RenderLease, SlotPool, SlotStatus};
pub use pyramid::{LayerInfo, LayerPair, Pyramid, TileAddress, Viewport, TILE_BYTES, TILE_EDGE};
pub use rtbs::{Engine, EngineConfig, EngineCounters, EngineError};
pub use session::{FrameLoop, FrameLoopConfig, FrameMailbox};
pub use signal::ChangeSignal;
pub use source::TileSource;
pub use spd::{Enhancer, MipChain, MipParams};
pub use synth::{FlatSource, Pattern, SynthSpec, SyntheticSource};

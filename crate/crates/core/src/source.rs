use crate::container::ContainerError;
use crate::pyramid::{Pyramid, TileAddress};

/// Anything the loader workers can decode tiles from.
///
/// Implementations must be safe to call from several threads at once and
/// must return exactly [`TILE_BYTES`](crate::pyramid::TILE_BYTES) bytes.
pub trait TileSource: Send + Sync {
    fn pyramid(&self) -> &Pyramid;
    fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError>;
}

impl<T: TileSource + ?Sized> TileSource for std::sync::Arc<T> {
    fn pyramid(&self) -> &Pyramid {
        (**self).pyramid()
    }

    fn load(&self, addr: TileAddress) -> Result<Vec<u8>, ContainerError> {
        (**self).load(addr)
    }
}

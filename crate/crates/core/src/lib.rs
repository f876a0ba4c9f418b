//! Point-cloud representation learning with a frozen image tower and a
//! trainable point expert inside shared multi-way Transformer blocks.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod render;
pub mod train;

pub use error::{Error, Result};

/// Raises glibc's trim threshold and top pad so the large per-step graph
/// buffers are reused instead of being returned to the kernel and faulted in
/// again on every step. No effect on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before
    // any threads are spawned.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

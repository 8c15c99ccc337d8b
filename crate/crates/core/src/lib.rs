//! Tabletop manipulation lab: a rendered 2.5-D world, mask-based observation
//! encodings, a small reverse-mode autodiff engine, PPO training and the
//! experiment harness around them.

pub mod autodiff;
pub mod disentangle;
pub mod imaging;
pub mod simworld;
pub mod policy;
pub mod ppo;
pub mod harness;

/// Keeps freed training buffers in the heap instead of returning them to the
/// kernel after every minibatch. On glibc, large allocations otherwise go
/// through fresh zeroed mappings each time, roughly a third of update time.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

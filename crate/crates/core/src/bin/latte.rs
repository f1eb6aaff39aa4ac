// glibc's allocator repeatedly returns and re-faults the large per-layer
// buffers of deep models, which distorts timings.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(latte::commands::main_with(std::env::args_os()));
}

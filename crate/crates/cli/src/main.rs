#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    s2v_cli::init_logging();
    std::process::exit(s2v_cli::run(std::env::args_os()));
}

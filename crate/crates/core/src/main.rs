mod cli;

#[global_allocator]
static ALLOC: srmkit::bench::TrackingAllocator = srmkit::bench::TrackingAllocator;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(cli::main_with_args(std::env::args_os()));
}

use clap::Parser;
use la2former_cli::{commands, Cli};

// Retains freed pages between tensor allocations; the system allocator
// returns large buffers to the OS and pays a page fault on every reuse.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use std::process::exit;

fn main() {
    exit(turbmit::cli::run(std::env::args_os()));
}

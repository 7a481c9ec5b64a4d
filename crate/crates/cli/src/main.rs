fn main() {
    // Failures are reported as JSON by `run`; keep panic text off stderr.
    std::panic::set_hook(Box::new(|_| {}));
    std::process::exit(mvi_cli::run(std::env::args_os()));
}

use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    veilscan_cli::cli::main_with_args(std::env::args_os())
}

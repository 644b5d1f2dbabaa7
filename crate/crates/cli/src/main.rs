use std::io;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let stdout = io::stdout();
    let stderr = io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let code = spinometry_cli::run_from(std::env::args_os(), &mut spinometry_cli::Console { out: &mut out, err: &mut err });
    std::process::exit(code);
}

fn main() {
    if let Err(e) = mpdetect::cli::run(std::env::args_os()) {
        // clap errors carry their own formatting and exit codes
        if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
            clap_err.exit();
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

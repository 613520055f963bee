use clap::Parser;

fn main() {
    let cli = vssl::cli::Cli::parse();
    match vssl::cli::run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("vssl: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

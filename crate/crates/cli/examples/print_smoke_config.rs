//! Prints the bundled mock-backed experiment config; pipe it to a file to
//! get a working starting point:
//!
//! ```sh
//! cargo run -p crossinject-cli --example print_smoke_config > config.json
//! ```

fn main() {
    println!(
        "{}",
        crossinject::config::ExperimentConfig::mock_smoke().to_json_pretty()
    );
}

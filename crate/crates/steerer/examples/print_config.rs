//! Print every configuration key with its default value.
//!
//!     cargo run --example print_config

fn main() {
    print!("{}", steerer::harness::RunConfig::default().to_text());
}

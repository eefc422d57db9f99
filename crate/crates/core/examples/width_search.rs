//! Prints the default width ladder: the cheapest configuration (multiply-adds
//! on a 96 x 96 input) whose parameter count lies within 3% of 2.4M.

use sandesc::net::config::{count_params, forward_macs, search_widths, NetworkConfig, DEFAULT_WIDTHS};

fn main() {
    let Some((widths, params)) = search_widths(2_400_000, 0.03, 272, 96) else {
        eprintln!("no ladder within tolerance");
        std::process::exit(1);
    };
    let cfg = NetworkConfig {
        widths,
        ..NetworkConfig::default()
    };
    println!(
        "widths {widths:?}: {params} parameters, {} MMACs at 96x96",
        forward_macs(&cfg, 96) / 1_000_000
    );
    if widths != DEFAULT_WIDTHS {
        println!("note: differs from the built-in default {DEFAULT_WIDTHS:?}");
    }
    assert_eq!(params, count_params(&cfg));
}

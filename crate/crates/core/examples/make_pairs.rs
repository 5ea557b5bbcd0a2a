//! Write a synthetic paired dataset as PNGs, ready for `xmt train`.
//!
//! ```sh
//! cargo run --release -p xmt-core --example make_pairs -- 16 64 7 data/A data/B
//! ```

use xmt_core::synthetic::paired_rasters;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 6 {
        eprintln!("usage: make_pairs <count> <size> <seed> <dir_A> <dir_B>");
        std::process::exit(2);
    }
    let n: usize = args[1].parse().expect("count");
    let size: usize = args[2].parse().expect("size");
    let seed: u64 = args[3].parse().expect("seed");
    let dir_a = std::path::Path::new(&args[4]);
    let dir_b = std::path::Path::new(&args[5]);
    for (i, (x, y)) in paired_rasters(n, size, seed).into_iter().enumerate() {
        x.save_png(&dir_a.join(format!("s{i:02}.png"))).unwrap();
        y.save_png(&dir_b.join(format!("s{i:02}.png"))).unwrap();
    }
    println!("wrote {n} pairs of {size}x{size} PNGs to {} and {}", args[4], args[5]);
}

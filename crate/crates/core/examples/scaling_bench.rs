//! Wall-time of the selective scan against naive self-attention as the
//! sequence grows; prints the CSV and the growth factor per doubling.

use stsmcd::bench::{run_bench, to_csv, BenchOptions};

fn main() -> stsmcd::Result<()> {
    let lengths = [256, 512, 1024, 2048, 4096];
    let rows = run_bench(&lengths, &BenchOptions::default())?;
    print!("{}", to_csv(&rows));
    for pair in rows.windows(2) {
        println!(
            "L {:>4} -> {:>4}: scan x{:.2}, attention x{:.2}",
            pair[0].len,
            pair[1].len,
            pair[1].scan_seq_ms / pair[0].scan_seq_ms,
            pair[1].attn_ms / pair[0].attn_ms
        );
    }
    Ok(())
}

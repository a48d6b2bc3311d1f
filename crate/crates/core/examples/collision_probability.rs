// Usage: cargo run --example collision_probability
//
// How often an in-batch negative shares the anchor's class, for a few class
// counts N and batch sizes B.

use qmatch::baselines::collision_probability;

fn main() {
    let batches = [32u64, 128, 512, 4096];
    print!("{:>8}", "N \\ B");
    for b in batches {
        print!("{b:>10}");
    }
    println!();
    for n in [2u64, 10, 100, 1000, 10_000] {
        print!("{n:>8}");
        for b in batches {
            print!("{:>10.4}", collision_probability(n, b));
        }
        println!();
    }
}

use slowrec_core::harness::RunConfig;
fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    println!("{}", RunConfig::desk_profile(seed).to_json());
}

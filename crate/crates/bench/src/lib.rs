//! Fixtures shared by the benchmarks.

use aqlog_core::{AirQualityBlock, SimConfig};

/// Plausible block for slave `s1` in zone `z`, varied by `i`.
pub fn sample_block(i: u64) -> AirQualityBlock {
    let w = (i % 97) as i64;
    AirQualityBlock::new(
        600 * i,
        "s1",
        "z",
        [45_000 + 10 * w, 2_500 + w, 100, 200, 32_000, 900, 1_400 + w, 2_250, 5_600],
        90,
    )
}

/// One zone of `slaves` nodes running for `hours` of virtual time.
pub fn scenario(slaves: usize, hours: u64) -> SimConfig {
    let names: Vec<String> = (0..slaves).map(|i| format!("\"s{i}\"")).collect();
    let text = format!(
        "seed = 1\nduration_secs = {}\n[[zones]]\nzone_id = \"z\"\nmaster_id = \"m\"\nslaves = [{}]\n",
        hours * 3600,
        names.join(", ")
    );
    SimConfig::from_toml_str(&text).expect("bench scenario parses")
}

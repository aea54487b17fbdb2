#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub const STATIONS: &str = r#"stations = [
    { id = "DORI", lon = -0.03, lat = 14.03 },
    { id = "OUAHIGOUYA", lon = -2.43, lat = 13.58 },
    { id = "OUAGADOUGOU", lon = -1.52, lat = 12.35 },
    { id = "FADA", lon = 0.37, lat = 12.07 },
    { id = "BOBO", lon = -4.32, lat = 11.17 },
    { id = "GAOUA", lon = -3.18, lat = 10.33 },
]"#;

/// A small synthetic run: six stations, 30 seasons, with a map grid.
pub fn small_config(seed: u64) -> String {
    format!(
        r#"seed = {seed}
output_dir = "out"

[synthetic]
n_years = 30
gamma = 0.1
b = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5]
a = [10.0, 10.05, 10.1, 10.15, 10.2, 10.25]
theta = [-0.6, -0.3, 0.0, 0.2, 0.4, 0.6]
tau = 200.0
kappa = 1.0
{STATIONS}

[marginal]
q_ell = 0.9

[diagnose]
bootstrap = 50

[simulate]
n_fields = 100

[returns]
periods = [10.0, 50.0]

[grid]
bbox = {{ lon_min = -5.0, lon_max = 1.0, lat_min = 10.0, lat_max = 14.5 }}
resolution = 0.5
"#
    )
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

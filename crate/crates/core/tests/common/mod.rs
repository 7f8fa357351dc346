#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use mcforge::runner::{Engine, MockEngineSpec};
use mcforge::workflow::WorkflowConfig;

pub const TEMPLATE: &str = "\
TITLE
Proton beam on a water phantom
BEAM {beam_energy} 0.0 0.0 0.0 0.0 1.0 PROTON
USRBDX          99.0      -211     -46.0      3.0       4.0       1.0  bxfluen
USRBDX          0.15    1.0E-9     100.0                         10.0&
DETECT           0.0    1.0E-9    1.0E-4                                tepc
RANDOMIZ         1.0    {seed}
START     {nps}
STOP
";

pub const NPS_PER_CYCLE: u64 = 200_000;
pub const CYCLES: usize = 5;

pub fn params_csv(nps: u64) -> String {
    format!("name,value\nbeam_energy,-0.150\nseed,1001\nnps,{nps}\n")
}

/// Template and parameter files in `dir`.
pub fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    fs::create_dir_all(dir).unwrap();
    let template = dir.join("example_template.inp");
    let params = dir.join("parameters.csv");
    fs::write(&template, TEMPLATE).unwrap();
    fs::write(&params, params_csv(NPS_PER_CYCLE)).unwrap();
    (template, params)
}

/// Mock whose noise-free average uncertainty is `u` percent on the first pass.
pub fn tuned_spec(u: f64) -> MockEngineSpec {
    MockEngineSpec::default().with_average_uncertainty(u, NPS_PER_CYCLE, CYCLES)
}

pub fn config(dir: &Path, first_pass_u: f64) -> WorkflowConfig {
    let (template, params) = write_inputs(dir);
    let mut cfg = WorkflowConfig::new(template, params, dir.join("run"));
    cfg.engine = Engine::Mock(tuned_spec(first_pass_u));
    cfg.cycles = CYCLES;
    cfg
}

//! Shared benchmark battery for the integration suites: six named physical
//! scenarios plus a reaction and a regularized variant, all driven through
//! the TOML configuration layer.

use msf1d::config::RunConfig;
use msf1d::scheme::{run, SchemeConfig, Trajectory};

pub struct BatteryCase {
    pub name: &'static str,
    pub toml: String,
}

fn base(body: &str) -> String {
    format!("schema = 1\n{body}")
}

pub fn battery() -> Vec<BatteryCase> {
    vec![
        BatteryCase {
            name: "mixing",
            toml: base(
                r#"
n = 2
[domain]
length = 1.0
cells = 64
[time]
tau = 1e-3
t_end = 0.12
[boundary]
lambda = 0.0
theta0 = 1.0
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "maxwell_stefan"
params = { b = [[0.0, 1.0], [1.0, 0.0]] }
[newton]
tol = 1e-10
[initial]
theta = { kind = "constant", value = 1.0 }
profiles = [
  { kind = "step", left = 0.9, right = 0.1, at = 0.5 },
  { kind = "step", left = 0.35, right = 1.15, at = 0.5 },
]
"#,
            ),
        },
        BatteryCase {
            name: "heating",
            toml: base(
                r#"
n = 2
[domain]
length = 1.0
cells = 48
[time]
tau = 5e-3
t_end = 0.5
[boundary]
lambda = 2.0
theta0 = 1.2
[kappa]
c = 0.8
C = 1.4
[matrix]
model = "constant_pi"
params = { c = 1.0 }
[newton]
tol = 1e-10
[initial]
theta = { kind = "constant", value = 0.8 }
profiles = [
  { kind = "gaussian", base = 0.4, amplitude = 0.3, center = 0.4, width = 0.15 },
  { kind = "constant", value = 0.7 },
]
"#,
            ),
        },
        BatteryCase {
            name: "cooling",
            toml: base(
                r#"
n = 3
[domain]
length = 1.0
cells = 48
[time]
tau = 5e-3
t_end = 0.5
[boundary]
lambda = 1.5
theta0 = 0.9
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "constant_pi"
params = { c = 0.7 }
[newton]
tol = 1e-10
[initial]
theta = { kind = "gaussian", base = 1.3, amplitude = 0.4, center = 0.5, width = 0.2 }
profiles = [
  { kind = "constant", value = 0.5 },
  { kind = "cosine", base = 0.6, amplitude = 0.2, mode = 1 },
  { kind = "constant", value = 0.8 },
]
"#,
            ),
        },
        BatteryCase {
            name: "soret",
            toml: base(
                r#"
n = 3
[domain]
length = 1.0
cells = 48
[time]
tau = 2e-3
t_end = 0.2
[boundary]
lambda = 0.0
theta0 = 1.0
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "maxwell_stefan"
params = { b = [[0.0, 1.0, 1.5], [1.0, 0.0, 0.8], [1.5, 0.8, 0.0]], q_star = [1.0, 0.0, -1.0] }
[newton]
tol = 1e-10
[initial]
theta = { kind = "gaussian", base = 0.9, amplitude = 0.5, center = 0.3, width = 0.15 }
profiles = [
  { kind = "constant", value = 0.5 },
  { kind = "constant", value = 0.7 },
  { kind = "constant", value = 0.6 },
]
"#,
            ),
        },
        BatteryCase {
            name: "dufour",
            toml: base(
                r#"
n = 2
[domain]
length = 1.0
cells = 48
[time]
tau = 2e-3
t_end = 0.2
[boundary]
lambda = 0.0
theta0 = 1.0
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "constant_pi"
params = { c = 1.0, sigma = [0.4, -0.4] }
[newton]
tol = 1e-10
[initial]
theta = { kind = "constant", value = 1.0 }
profiles = [
  { kind = "step", left = 0.8, right = 0.2, at = 0.5 },
  { kind = "step", left = 0.4, right = 1.0, at = 0.5 },
]
"#,
            ),
        },
        BatteryCase {
            name: "degenerate",
            toml: base(
                r#"
n = 2
[domain]
length = 1.0
cells = 64
[time]
tau = 5e-4
t_end = 0.05
[boundary]
lambda = 0.0
theta0 = 1.0
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "degenerate_pirhopi"
[newton]
tol = 1e-10
[initial]
theta = { kind = "constant", value = 1.0 }
profiles = [
  { kind = "gaussian", base = 1e-4, amplitude = 0.4, center = 0.5, width = 0.12 },
  { kind = "constant", value = 1.0 },
]
"#,
            ),
        },
        BatteryCase {
            name: "reaction",
            toml: base(
                r#"
n = 3
[domain]
length = 1.0
cells = 48
[time]
tau = 2e-3
t_end = 0.2
[boundary]
lambda = 0.5
theta0 = 1.0
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "constant_pi"
params = { c = 0.8 }
[reaction]
model = "linear_pi_q"
c_r = 0.8
[newton]
tol = 1e-10
[initial]
theta = { kind = "constant", value = 1.1 }
profiles = [
  { kind = "cosine", base = 0.5, amplitude = 0.2, mode = 1 },
  { kind = "constant", value = 0.6 },
  { kind = "constant", value = 0.7 },
]
"#,
            ),
        },
        BatteryCase {
            name: "epsilon",
            toml: base(
                r#"
n = 2
[domain]
length = 1.0
cells = 32
epsilon = 1e-3
[time]
tau = 1e-3
t_end = 0.05
[boundary]
lambda = 1.0
theta0 = 1.1
[kappa]
c = 1.0
C = 1.0
[matrix]
model = "constant_pi"
params = { c = 1.0 }
[newton]
tol = 1e-10
[initial]
theta = { kind = "gaussian", base = 0.9, amplitude = 0.3, center = 0.6, width = 0.2 }
profiles = [
  { kind = "step", left = 0.7, right = 0.3, at = 0.4 },
  { kind = "step", left = 0.5, right = 0.9, at = 0.4 },
]
"#,
            ),
        },
    ]
}

pub struct BatteryRun {
    pub name: &'static str,
    pub config: RunConfig,
    pub scheme: SchemeConfig,
    pub trajectory: Trajectory,
}

pub fn run_case(case: &BatteryCase) -> BatteryRun {
    let config = RunConfig::from_str(&case.toml)
        .unwrap_or_else(|e| panic!("config `{}`: {e}", case.name));
    let scheme = config.scheme_config().expect("scheme config");
    let initial = config.initial_state().expect("initial state");
    let trajectory = run(&initial, &scheme, config.time.t_end, |_| {})
        .unwrap_or_else(|e| panic!("run `{}`: {e}", case.name));
    BatteryRun {
        name: case.name,
        config,
        scheme,
        trajectory,
    }
}

pub fn run_battery() -> Vec<BatteryRun> {
    battery().iter().map(run_case).collect()
}

use csda_core::scenario::{HypothesisReport, ScenarioParams};
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

/// Record of one run, written atomically at the end.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config_path: Option<String>,
    pub threads: usize,
    pub config: Option<ScenarioParams>,
    pub validation: Option<HypothesisReport>,
    pub timings: Vec<(String, f64)>,
    pub results: serde_json::Map<String, serde_json::Value>,
    pub artifacts: Vec<String>,
    pub status: String,
    pub exit_code: u8,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: String, config_path: Option<&Path>, threads: usize, config: Option<ScenarioParams>) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_path: config_path.map(|p| p.display().to_string()),
            threads,
            config,
            validation: None,
            timings: Vec::new(),
            results: Default::default(),
            artifacts: Vec::new(),
            status: "running".into(),
            exit_code: 0,
            clock: Some(Instant::now()),
        }
    }

    /// Times `f` under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push((stage.into(), t.elapsed().as_secs_f64()));
        out
    }

    pub fn result<T: Serialize>(&mut self, key: &str, value: T) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.results.insert(key.into(), v);
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.into());
    }

    pub fn finish(&mut self, status: &str, exit_code: u8) {
        if let Some(c) = self.clock.take() {
            self.timings.push(("total".into(), c.elapsed().as_secs_f64()));
        }
        self.status = status.into();
        self.exit_code = exit_code;
    }
}

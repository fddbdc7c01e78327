//! Browser bindings for the demo page in `www/`.
//!
//! Every export takes and returns JSON strings. The plain functions in
//! [`ops`] do the work and are what the native tests exercise; the
//! `#[wasm_bindgen]` shims only turn errors into JS exceptions.

use wasm_bindgen::prelude::*;

pub mod ops {
    use serde::{Deserialize, Serialize};

    use fedreft_core::aggregation::{self, WeiszfeldConfig};
    use fedreft_core::intervention::LoReftParams;
    use fedreft_core::numeric::Matrix;
    use fedreft_core::orchestrator::{
        AggregationMethod, DataConfig, Experiment, ExperimentConfig,
    };

    #[derive(Debug, Serialize)]
    pub struct WeiszfeldTrace {
        pub mean: [f64; 2],
        pub median: [f64; 2],
        /// Iterates starting at the mean.
        pub iterates: Vec<[f64; 2]>,
        pub objective: Vec<f64>,
        pub mean_objective: f64,
    }

    fn pair(v: &[f64]) -> [f64; 2] {
        [v[0], v[1]]
    }

    /// `points` is `[[x, y], ...]`.
    pub fn weiszfeld_trace(points: &str) -> Result<String, String> {
        let pts: Vec<[f64; 2]> = serde_json::from_str(points).map_err(|e| e.to_string())?;
        if pts.is_empty() {
            return Err("need at least one point".into());
        }
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let cfg = WeiszfeldConfig::default();
        let (median, diag) = aggregation::weiszfeld(&refs, &cfg).map_err(|e| e.to_string())?;
        let n = pts.len() as f64;
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        // replay the run one step at a time to recover the iterates
        let mut iterates = vec![mean];
        for k in 1..=diag.iterations {
            let (y, _) = aggregation::weiszfeld(&refs, &WeiszfeldConfig { max_iter: k, ..cfg })
                .map_err(|e| e.to_string())?;
            iterates.push(pair(&y));
        }
        let out = WeiszfeldTrace {
            mean,
            median: pair(&median),
            iterates,
            mean_objective: aggregation::sum_of_distances(&mean, &refs),
            objective: diag.objective_trace,
        };
        Ok(serde_json::to_string(&out).expect("serializable"))
    }

    #[derive(Debug, Deserialize)]
    pub struct FieldRequest {
        /// Angle of the single row of `R` (radians).
        pub theta: f64,
        pub w: [f64; 2],
        pub b: f64,
        /// Half-width of the square grid.
        pub extent: f64,
        pub steps: usize,
    }

    #[derive(Debug, Serialize)]
    pub struct FieldSample {
        pub h: [f64; 2],
        pub delta: [f64; 2],
    }

    #[derive(Debug, Serialize)]
    pub struct Field {
        pub r: [f64; 2],
        pub samples: Vec<FieldSample>,
    }

    /// Displacement `Φ(h) − h` of a rank-1 intervention on a 2-D grid. All
    /// arrows are parallel to `R`.
    pub fn loreft_field(request: &str) -> Result<String, String> {
        let req: FieldRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
        if req.steps < 2 || req.steps > 64 {
            return Err("steps must lie in 2..=64".into());
        }
        let r = [req.theta.cos(), req.theta.sin()];
        let p = LoReftParams::new(
            Matrix::from_vec(1, 2, req.w.to_vec()).map_err(|e| e.to_string())?,
            Matrix::from_vec(1, 2, r.to_vec()).map_err(|e| e.to_string())?,
            vec![req.b],
        )
        .map_err(|e| e.to_string())?;
        let mut samples = Vec::with_capacity(req.steps * req.steps);
        for i in 0..req.steps {
            for j in 0..req.steps {
                let t = |k: usize| -req.extent + 2.0 * req.extent * k as f64 / (req.steps - 1) as f64;
                let h = [t(i), t(j)];
                let y = p.apply(&h).map_err(|e| e.to_string())?;
                samples.push(FieldSample {
                    h,
                    delta: [y[0] - h[0], y[1] - h[1]],
                });
            }
        }
        Ok(serde_json::to_string(&Field { r, samples }).expect("serializable"))
    }

    #[derive(Debug, Deserialize)]
    pub struct CompareRequest {
        pub seed: u64,
        pub rounds: usize,
        #[serde(default = "default_examples")]
        pub examples_per_client: usize,
    }

    fn default_examples() -> usize {
        200
    }

    #[derive(Debug, Serialize)]
    pub struct MethodCurve {
        pub method: &'static str,
        pub accuracy: Vec<f64>,
        pub alphas: Vec<Vec<f64>>,
    }

    /// Runs the three aggregation rules on the same 3-client distinct-task
    /// federation and returns per-round mean test accuracy.
    pub fn compare_aggregators(request: &str) -> Result<String, String> {
        let req: CompareRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
        if req.rounds == 0 || req.rounds > 20 {
            return Err("rounds must lie in 1..=20".into());
        }
        let mut curves = Vec::new();
        for m in [
            AggregationMethod::AbmGeomedian,
            AggregationMethod::AbmMean,
            AggregationMethod::Fedavg,
        ] {
            let mut cfg = ExperimentConfig {
                rounds: req.rounds,
                aggregation: m,
                seed: req.seed,
                data: DataConfig {
                    examples_per_client: req.examples_per_client,
                    ..Default::default()
                },
                ..Default::default()
            };
            cfg.optimizer.epochs = 1;
            let mut exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
            let reports = exp.run_with(|_| {}).map_err(|e| e.to_string())?;
            curves.push(MethodCurve {
                method: m.name(),
                accuracy: reports.iter().map(|r| r.mean_accuracy).collect(),
                alphas: reports
                    .iter()
                    .map(|r| r.clients.iter().map(|c| c.alpha).collect())
                    .collect(),
            });
        }
        Ok(serde_json::to_string(&curves).expect("serializable"))
    }
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = weiszfeldTrace)]
pub fn weiszfeld_trace(points: &str) -> Result<String, JsValue> {
    js(ops::weiszfeld_trace(points))
}

#[wasm_bindgen(js_name = loreftField)]
pub fn loreft_field(request: &str) -> Result<String, JsValue> {
    js(ops::loreft_field(request))
}

#[wasm_bindgen(js_name = compareAggregators)]
pub fn compare_aggregators(request: &str) -> Result<String, JsValue> {
    js(ops::compare_aggregators(request))
}

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::JobConfig;
use crate::Failure;

#[derive(Serialize)]
struct Artifact {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a JobConfig,
    versions: Versions,
    started_unix: u64,
    wall_time_s: f64,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: &'a [Artifact],
    bias_bounds: &'a [(String, f64)],
}

#[derive(Serialize)]
struct Versions {
    gxz: &'static str,
    rustc_target: &'static str,
}

/// Output directory of one run. Every artifact is checksummed into `manifest.json`.
pub struct Run {
    dir: PathBuf,
    command: String,
    started: Instant,
    started_unix: u64,
    artifacts: Vec<Artifact>,
    bias: Vec<(String, f64)>,
}

impl Run {
    pub fn new(dir: &Path, command: String) -> Self {
        Run {
            dir: dir.to_path_buf(),
            command,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            artifacts: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Failure::io(&self.dir, e))?;
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        self.record(name, bytes);
        Ok(())
    }

    /// Register a file written by someone else.
    pub fn adopt(&mut self, name: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Failure::io(&path, e))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.retain(|a| a.file != name);
        self.artifacts.push(Artifact { file: name.into(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) });
    }

    pub fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::numerical(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn bias(&mut self, what: impl Into<String>, bound: Option<f64>) {
        if let Some(b) = bound {
            self.bias.push((what.into(), b));
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write `manifest.json`; called on success and failure alike.
    pub fn finish(&self, cfg: &JobConfig, error: Option<&Failure>) -> std::io::Result<()> {
        let m = RunManifest {
            command: &self.command,
            config: cfg,
            versions: Versions { gxz: env!("CARGO_PKG_VERSION"), rustc_target: std::env::consts::ARCH },
            started_unix: self.started_unix,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            status: if error.is_some() { "error" } else { "ok" },
            error: error.map(|e| e.message.clone()),
            outputs: &self.artifacts,
            bias_bounds: &self.bias,
        };
        std::fs::create_dir_all(&self.dir)?;
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        std::fs::write(self.dir.join("manifest.json"), s)
    }
}

/// Small static line plot; `log_x` plots against `ln x`.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], log_x: bool) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let tx = |x: f64| if log_x { x.ln() } else { x };
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| tx(*x).is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        let x = tx(x);
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| m + (tx(x) - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{m}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
        w / 2.0,
        escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 12.0,
        escape(x_label),
        h / 2.0,
        h / 2.0,
        escape(y_label),
        h - m + 16.0,
        if log_x { x0.exp() } else { x0 },
        w - m,
        h - m + 16.0,
        if log_x { x1.exp() } else { x1 },
        m - 4.0,
        h - m,
        y0,
        m - 4.0,
        m + 4.0,
        y1
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = p.iter().filter(|(x, y)| tx(*x).is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>\n", path.join(" "));
        for pt in &path {
            let (a, b) = pt.split_once(',').unwrap();
            s += &format!("<circle cx=\"{a}\" cy=\"{b}\" r=\"2.5\" fill=\"{c}\"/>\n");
        }
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>\n", w - m + 4.0, m + 14.0 * i as f64, escape(name));
    }
    s + "</svg>\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed() {
        let s = svg_plot("P[A]", "u", "p", &[("L=2".into(), vec![(0.5, 1.0), (1.0, 0.4)]), ("L=4".into(), vec![(0.5, 0.9)])], true);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(svg_plot("", "", "", &[], false).contains("</svg>"));
    }

    #[test]
    fn manifest_lists_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new(dir.path(), "test".into());
        run.write("a.csv", b"x\n1\n").unwrap();
        run.finish(&JobConfig::default(), None).unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["outputs"][0]["file"], "a.csv");
        assert_eq!(m["outputs"][0]["sha256"], hex::encode(Sha256::digest(b"x\n1\n")));
        assert_eq!(m["status"], "ok");
    }
}

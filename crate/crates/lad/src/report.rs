//! Run reports: a machine-readable JSON document and a human-readable text
//! table side by side, plus the sweep's SVG line plot. Every number is
//! copied verbatim from a metrics or manifest file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One (α, noising-mode) cell of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub class_wise: bool,
    pub alpha: f64,
    pub teacher_miou: f64,
    pub student_miou: f64,
    pub teacher_checkpoint: String,
    pub student_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportBlock {
    Eval {
        checkpoint: String,
        dataset: String,
        miou: f64,
        per_class: Vec<Option<f64>>,
    },
    Stability {
        checkpoint: String,
        dataset: String,
        m: usize,
        images: usize,
        kl_mean: f64,
        kl_mean_x100: f64,
        per_image: Vec<f64>,
    },
    Shortcut {
        checkpoint: String,
        dataset: String,
        draws: usize,
        per_image: Vec<f64>,
        median: f64,
    },
    SweepAlpha {
        config_hash: String,
        seed: u64,
        alphas: Vec<f64>,
        cells: Vec<SweepCell>,
        plot: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub blocks: Vec<ReportBlock>,
}

impl Default for RunReport {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            blocks: Vec::new(),
        }
    }
}

pub fn report_json_path(dir: &Path) -> PathBuf {
    dir.join("report.json")
}

pub fn report_text_path(dir: &Path) -> PathBuf {
    dir.join("report.txt")
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = report_json_path(dir);
    if !path.exists() {
        return Ok(RunReport::default());
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| LadError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| LadError::InvalidConfig(format!("{}: invalid report: {e}", path.display())))
}

/// Appends a block and rewrites both renditions.
pub fn append_block(dir: &Path, block: ReportBlock) -> Result<RunReport> {
    fs::create_dir_all(dir).map_err(|e| LadError::io(format!("creating {}", dir.display()), e))?;
    let mut report = load_report(dir)?;
    report.blocks.push(block);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| LadError::InvalidConfig(format!("report serialization failed: {e}")))?;
    let json_path = report_json_path(dir);
    fs::write(&json_path, json + "\n")
        .map_err(|e| LadError::io(format!("writing {}", json_path.display()), e))?;
    let text_path = report_text_path(dir);
    fs::write(&text_path, render_text(&report))
        .map_err(|e| LadError::io(format!("writing {}", text_path.display()), e))?;
    Ok(report)
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "absent".into(),
    }
}

pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    for (i, block) in report.blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match block {
            ReportBlock::Eval {
                checkpoint,
                dataset,
                miou,
                per_class,
            } => {
                out.push_str(&format!("[eval] {checkpoint} on {dataset}\n"));
                out.push_str(&format!("  mIoU {miou:.4}\n"));
                for (class, iou) in per_class.iter().enumerate() {
                    out.push_str(&format!("  class {class}: {}\n", fmt_opt(iou)));
                }
            }
            ReportBlock::Stability {
                checkpoint,
                dataset,
                m,
                images,
                kl_mean,
                kl_mean_x100,
                ..
            } => {
                out.push_str(&format!("[stability] {checkpoint} on {dataset}\n"));
                out.push_str(&format!(
                    "  KL_mean {kl_mean:.6} (x100: {kl_mean_x100:.4}) over {images} images, m = {m}\n"
                ));
            }
            ReportBlock::Shortcut {
                checkpoint,
                dataset,
                draws,
                per_image,
                median,
            } => {
                out.push_str(&format!("[shortcut] {checkpoint} on {dataset}\n"));
                out.push_str(&format!(
                    "  saliency ratio median {median:.4} over {} images, {draws} draws each\n",
                    per_image.len()
                ));
            }
            ReportBlock::SweepAlpha {
                config_hash,
                seed,
                alphas,
                cells,
                plot,
            } => {
                out.push_str(&format!("[sweep-alpha] seed {seed}, config {config_hash}\n"));
                out.push_str("  alpha:      ");
                for alpha in alphas {
                    out.push_str(&format!("{alpha:>16}"));
                }
                out.push('\n');
                for class_wise in [true, false] {
                    let label = if class_wise { "class-wise" } else { "direct    " };
                    out.push_str(&format!("  {label}:"));
                    for alpha in alphas {
                        let cell = cells
                            .iter()
                            .find(|c| c.class_wise == class_wise && c.alpha == *alpha);
                        match cell {
                            Some(c) => out.push_str(&format!(
                                "  T {:.3}/S {:.3}",
                                c.teacher_miou, c.student_miou
                            )),
                            None => out.push_str(&format!("{:>16}", "-")),
                        }
                    }
                    out.push('\n');
                }
                out.push_str(&format!("  plot: {plot}\n"));
            }
        }
    }
    out
}

/// Minimal hand-rolled SVG line plot: mIoU against the α grid (categorical
/// x positions), one line per (role × noising mode).
pub fn write_sweep_svg(path: &Path, alphas: &[f64], cells: &[SweepCell]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 160.0;
    const MT: f64 = 30.0;
    const MB: f64 = 50.0;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let x_at = |i: usize| {
        if alphas.len() <= 1 {
            ML + plot_w / 2.0
        } else {
            ML + plot_w * i as f64 / (alphas.len() - 1) as f64
        }
    };
    let y_at = |miou: f64| MT + plot_h * (1.0 - miou.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#444\"/>\n"
    ));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = y_at(v);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y}\" x2=\"{:.1}\" y2=\"{y}\" stroke=\"#ccc\"/>\n",
            ML + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            ML - 6.0,
            y + 4.0
        ));
    }
    for (i, alpha) in alphas.iter().enumerate() {
        let x = x_at(i);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{alpha}</text>\n",
            H - MB + 20.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">alpha</text>\n",
        ML + plot_w / 2.0,
        H - 10.0
    ));

    let series: [(&str, bool, bool, &str); 4] = [
        ("teacher, class-wise", true, true, "#d62728"),
        ("student, class-wise", false, true, "#1f77b4"),
        ("teacher, direct", true, false, "#ff9896"),
        ("student, direct", false, false, "#aec7e8"),
    ];
    for (si, (label, is_teacher, class_wise, color)) in series.iter().enumerate() {
        let mut points = Vec::new();
        for (i, alpha) in alphas.iter().enumerate() {
            if let Some(cell) = cells
                .iter()
                .find(|c| c.class_wise == *class_wise && c.alpha == *alpha)
            {
                let v = if *is_teacher {
                    cell.teacher_miou
                } else {
                    cell.student_miou
                };
                points.push(format!("{:.1},{:.1}", x_at(i), y_at(v)));
            }
        }
        if points.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                points.join(" ")
            ));
        }
        let ly = MT + 16.0 * (si as f64 + 1.0);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly}\" x2=\"{:.1}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            W - MR + 10.0,
            W - MR + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n",
            W - MR + 40.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| LadError::io(format!("writing {}", path.display()), e))
}

//! Dataset preparation, single training runs, and the ablation sweeps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{tokenize, BackboneParams, Vocab};
use crate::category::generate_all;
use crate::config::RunConfig;
use crate::dataset::{
    few_shot_split, generate, read_manifest, read_taxonomy, select, write_manifest, write_taxonomy, CaptionRecord,
    DatasetConfig, Split, Taxonomy,
};
use crate::error::{Error, Result};
use crate::retrieval::{Direction, RetrievalReport, DEFAULT_KS};
use crate::training::{evaluate, train, Pair, Toggles, TrainConfig, TrainExample, TrainOutcome};

pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

/// A generated dataset with its few-shot split and vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub taxonomy: Taxonomy,
    pub vocab: Vocab,
    pub records: Vec<CaptionRecord>,
}

impl Prepared {
    pub fn generate(cfg: &DatasetConfig, shots: usize, split_seed: u64) -> Result<Self> {
        let (taxonomy, manifest) = generate(cfg)?;
        let records = few_shot_split(&manifest.records, shots, split_seed)?;
        let vocab = Vocab::from_words(taxonomy.caption_words());
        Ok(Self {
            taxonomy,
            vocab,
            records,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::generate(&cfg.dataset, cfg.train.shots, cfg.split_seed)
    }

    /// The same records split again with a different shot count.
    pub fn resplit(&self, shots: usize, split_seed: u64) -> Result<Self> {
        Ok(Self {
            records: few_shot_split(&self.records, shots, split_seed)?,
            ..self.clone()
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_taxonomy(&dir.join(TAXONOMY_FILE), &self.taxonomy)?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.records)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            taxonomy: read_taxonomy(&dir.join(TAXONOMY_FILE))?,
            vocab: Vocab::load(&dir.join(VOCAB_FILE))?,
            records: read_manifest(&dir.join(MANIFEST_FILE))?,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn records(&self, split: Split) -> Vec<CaptionRecord> {
        select(&self.records, split)
    }

    pub fn pairs(&self, split: Split, max_len: usize) -> Result<Vec<Pair>> {
        use rayon::prelude::*;
        self.records(split)
            .par_iter()
            .map(|r| {
                Ok(Pair {
                    id: r.id.clone(),
                    caption: tokenize(&r.caption, &self.vocab, max_len),
                    image: r.render(&self.taxonomy)?,
                })
            })
            .collect()
    }

    /// Training pairs with `q` negatives each, generated from `seed`.
    pub fn examples(&self, q: i64, seed: u64, max_len: usize) -> Result<Vec<TrainExample>> {
        let records = self.records(Split::Train);
        let pairs = self.pairs(Split::Train, max_len)?;
        let negs = generate_all(&records, &self.taxonomy, q, seed)?;
        let per = q.max(0) as usize;
        Ok(pairs
            .into_iter()
            .enumerate()
            .map(|(i, pair)| TrainExample {
                pair,
                negatives: negs[i * per..(i + 1) * per]
                    .iter()
                    .map(|n| (tokenize(&n.text, &self.vocab, max_len), n.kind))
                    .collect(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmOutcome {
    pub arm: String,
    pub seed: u64,
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
    pub train: TrainOutcome,
}

/// Trains with `cfg` and reports test retrieval.
pub fn run_arm(cfg: &TrainConfig, backbone: &BackboneParams<f32>, data: &Prepared) -> Result<ArmOutcome> {
    let max_len = backbone.config.max_len;
    let examples = if cfg.toggles.use_dual_prompt || cfg.toggles.use_category_loss {
        data.examples(cfg.q, cfg.seed, max_len)?
    } else {
        Vec::new()
    };
    let val = data.pairs(Split::Val, max_len)?;
    let test = data.pairs(Split::Test, max_len)?;
    let outcome = train(cfg, backbone, &examples, &val)?;
    let (i2t, t2i) = evaluate(backbone, outcome.state.prompts.as_ref(), &test, &DEFAULT_KS)?;
    Ok(ArmOutcome {
        arm: cfg.toggles.arm_name(),
        seed: cfg.seed,
        i2t,
        t2i,
        train: outcome,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: String,
    pub arm: String,
    pub direction: Direction,
    /// Test R@1 per seed, in seed order.
    pub values: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation (0 for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

fn rows_for(group: &str, arm: &str, outcomes: &[ArmOutcome]) -> [AblationRow; 2] {
    let collect = |f: &dyn Fn(&ArmOutcome) -> f64| outcomes.iter().map(f).collect();
    [
        AblationRow {
            group: group.into(),
            arm: arm.into(),
            direction: Direction::ImageToText,
            values: collect(&|o| o.i2t.r_at(1)),
        },
        AblationRow {
            group: group.into(),
            arm: arm.into(),
            direction: Direction::TextToImage,
            values: collect(&|o| o.t2i.r_at(1)),
        },
    ]
}

fn over_seeds(cfg: &TrainConfig, seeds: &[u64], backbone: &BackboneParams<f32>, data: &Prepared) -> Result<Vec<ArmOutcome>> {
    // Without trainable state every seed gives the same zero-shot numbers.
    if cfg.toggles == Toggles::NONE {
        let o = run_arm(cfg, backbone, data)?;
        return Ok(seeds.iter().map(|&s| ArmOutcome { seed: s, ..o.clone() }).collect());
    }
    seeds
        .iter()
        .map(|&seed| run_arm(&TrainConfig { seed, ..cfg.clone() }, backbone, data))
        .collect()
}

/// The five component arms: none, DP, DP+CA, DP+TW, DP+CA+TW.
pub fn ablate_toggles(
    cfg: &TrainConfig,
    seeds: &[u64],
    backbone: &BackboneParams<f32>,
    data: &Prepared,
    mut progress: impl FnMut(&str, &[ArmOutcome]),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for toggles in Toggles::ARMS {
        let c = TrainConfig { toggles, ..cfg.clone() };
        let outs = over_seeds(&c, seeds, backbone, data)?;
        progress(&toggles.arm_name(), &outs);
        rows.extend(rows_for("toggles", &toggles.arm_name(), &outs));
    }
    Ok(rows)
}

pub const LAMBDA_GRID: [(f64, f64); 4] = [(1.0, 0.0), (0.8, 0.2), (0.5, 0.5), (0.2, 0.8)];
pub const SHOTS_GRID: [usize; 5] = [1, 2, 4, 8, 16];

pub fn lambda_arm_name(l1: f64, l2: f64) -> String {
    format!("l1={l1}/l2={l2}")
}

/// Full method over the (λ1, λ2) grid.
pub fn ablate_lambda(
    cfg: &TrainConfig,
    seeds: &[u64],
    backbone: &BackboneParams<f32>,
    data: &Prepared,
    mut progress: impl FnMut(&str, &[ArmOutcome]),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (l1, l2) in LAMBDA_GRID {
        let c = TrainConfig {
            lambda1: l1,
            lambda2: l2,
            toggles: Toggles::FULL,
            ..cfg.clone()
        };
        let outs = over_seeds(&c, seeds, backbone, data)?;
        let name = lambda_arm_name(l1, l2);
        progress(&name, &outs);
        rows.extend(rows_for("lambda", &name, &outs));
    }
    Ok(rows)
}

/// Full method over the shot counts, re-splitting the data for each.
pub fn ablate_shots(
    cfg: &TrainConfig,
    seeds: &[u64],
    split_seed: u64,
    backbone: &BackboneParams<f32>,
    data: &Prepared,
    mut progress: impl FnMut(&str, &[ArmOutcome]),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for shots in SHOTS_GRID {
        let d = data.resplit(shots, split_seed)?;
        let c = TrainConfig {
            shots,
            toggles: Toggles::FULL,
            ..cfg.clone()
        };
        let outs = over_seeds(&c, seeds, backbone, &d)?;
        let name = format!("shots={shots}");
        progress(&name, &outs);
        rows.extend(rows_for("shots", &name, &outs));
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "group,arm,direction,mean_r1,std_r1,n_seeds,per_seed";

pub fn write_ablation_rows<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    for r in rows {
        let per: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            r.group,
            r.arm,
            r.direction,
            r.mean(),
            r.std(),
            r.values.len(),
            per.join(";")
        )?;
    }
    Ok(())
}

/// Parses rows written by [`write_ablation_rows`], skipping comments and the header.
pub fn read_ablation_rows(text: &str) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("group,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Dataset(format!("malformed ablation row: {line}")));
        }
        let direction = match f[2] {
            "I2T" => Direction::ImageToText,
            "T2I" => Direction::TextToImage,
            d => return Err(Error::Dataset(format!("unknown direction {d}"))),
        };
        let values = f[6]
            .split(';')
            .map(|v| v.parse::<f64>().map_err(|_| Error::Dataset(format!("bad value {v}"))))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            group: f[0].into(),
            arm: f[1].into(),
            direction,
            values,
        });
    }
    Ok(rows)
}

/// Writes `header` preceded by the config-hash comment line.
pub fn csv_preamble<W: Write>(out: &mut W, config_hash: &str, header: &str) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "{header}")?;
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::MissingInput {
                path: parent.to_path_buf(),
                reason: "output directory does not exist".into(),
            });
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of mean test R@1 with ±std bars, one panel per group and one
/// line per direction.
pub fn ablation_svg(rows: &[AblationRow]) -> String {
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let width = MARGIN + groups.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.5 * MARGIN;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (gi, group) in groups.iter().enumerate() {
        let x0 = MARGIN + gi as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let mut arms: Vec<&str> = Vec::new();
        for r in rows.iter().filter(|r| r.group == *group) {
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        let ymax = rows
            .iter()
            .filter(|r| r.group == *group)
            .map(|r| r.mean() + r.std())
            .fold(0.0f64, f64::max)
            .max(1e-6)
            .min(1.0);
        let px = |i: usize| x0 + (i as f64 + 0.5) * PANEL_W / arms.len() as f64;
        let py = |v: f64| y0 + PANEL_H * (1.0 - (v / ymax).clamp(0.0, 1.0));
        s += &format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#888\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{ymax:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n",
            x0 + PANEL_W / 2.0,
            y0 - 10.0,
            esc(group),
            x0 - 4.0,
            y0 + 4.0,
            x0 - 4.0,
            y0 + PANEL_H
        );
        for (i, arm) in arms.iter().enumerate() {
            s += &format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                px(i),
                y0 + PANEL_H + 16.0,
                esc(arm)
            );
        }
        for (direction, colour) in [(Direction::ImageToText, "#1f77b4"), (Direction::TextToImage, "#d62728")] {
            let pts: Vec<(f64, f64, f64)> = arms
                .iter()
                .enumerate()
                .filter_map(|(i, arm)| {
                    rows.iter()
                        .find(|r| r.group == *group && r.arm == *arm && r.direction == direction)
                        .map(|r| (px(i), r.mean(), r.std()))
                })
                .collect();
            let path: Vec<String> = pts.iter().map(|(x, m, _)| format!("{x:.1},{:.1}", py(*m))).collect();
            s += &format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>\n",
                path.join(" ")
            );
            for (x, m, sd) in pts {
                s += &format!(
                    "<line x1=\"{x:.1}\" x2=\"{x:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"{colour}\"/>\n\
                     <circle cx=\"{x:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>\n",
                    py(m - sd),
                    py(m + sd),
                    py(m)
                );
            }
        }
        if gi == 0 {
            s += &format!(
                "<text x=\"{}\" y=\"{}\" fill=\"#1f77b4\">I2T R@1</text>\n\
                 <text x=\"{}\" y=\"{}\" fill=\"#d62728\">T2I R@1</text>\n",
                x0,
                y0 + PANEL_H + 36.0,
                x0 + 70.0,
                y0 + PANEL_H + 36.0
            );
        }
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_csv_round_trip() {
        let rows = vec![AblationRow {
            group: "toggles".into(),
            arm: "DP+CA".into(),
            direction: Direction::TextToImage,
            values: vec![0.25, 0.5, 0.75],
        }];
        let mut buf = Vec::new();
        csv_preamble(&mut buf, "abc", ABLATION_CSV_HEADER).unwrap();
        write_ablation_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("toggles,DP+CA,T2I,0.500000,0.250000,3,0.250000;0.500000;0.750000"));
        assert_eq!(read_ablation_rows(&text).unwrap(), rows);
        let svg = ablation_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.contains("DP+CA") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn examples_carry_negatives() {
        let cfg = DatasetConfig {
            base_metas: 1,
            downstream_metas: 1,
            subs_per_meta: 2,
            per_sub: 6,
            ..Default::default()
        };
        let d = Prepared::generate(&cfg, 2, 0).unwrap();
        let ex = d.examples(3, 1, 32).unwrap();
        assert_eq!(ex.len(), 4);
        assert!(ex.iter().all(|e| e.negatives.len() == 3));
        assert_eq!(d.count(Split::Val), 2);
        assert_eq!(d.count(Split::Test), 6);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gbwb_core::annotation::{
    balanced_label_histogram, bbox_heatmap, group_by_person, load_records, AnnotationRecord, BoxHeatmap,
    DEFAULT_HIGHLIGHT_PERCENTILE,
};
use gbwb_core::comparison::{
    average_heatmap, overlap_counts, relative_heatmap, CLASSIFIER_RELATIVE_FRACTION, HUMAN_RELATIVE_FRACTION,
};
use gbwb_core::mapfile::read_map_dir;
use gbwb_core::saliency::{
    class_saliency_heatmap, masked_consistency_r2, BinaryMask, ClassHeatmap, SaliencyMap, DEFAULT_HIGHLIGHT_FRACTION,
    DEFAULT_MASK_FRACTION,
};
use gbwb_core::{render, Checkpoint, Tensor};
use gbwb_service::ImagePool;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Per-class heatmaps of classifier saliency maps.
    Classifier,
    /// Per-person bounding-box heatmaps and the label histogram.
    Human,
    /// Individual heatmaps minus the average over all individuals.
    Relative,
    /// Overlap between human and classifier highlights per person.
    Compare,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Directory of saliency maps (`.pgm` + `.json`).
    #[arg(long)]
    maps_dir: Option<PathBuf>,
    /// Annotation store (newline-delimited JSON).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Only emit outputs for this person (class name or index for maps).
    #[arg(long)]
    person: Option<String>,
    /// Checkpoint whose class names label the saliency maps.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Image pool, used to look up annotated image sizes.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Annotated image size as WIDTHxHEIGHT; overrides `--images`.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Fraction of pixels kept from each saliency map before averaging.
    #[arg(long, default_value_t = DEFAULT_MASK_FRACTION)]
    mask_top: f64,
    /// Fraction of pixels highlighted in a class heatmap.
    #[arg(long, default_value_t = DEFAULT_HIGHLIGHT_FRACTION)]
    highlight_top: f64,
    /// Box heatmap pixels strictly above this percentile are highlighted.
    #[arg(long, default_value_t = DEFAULT_HIGHLIGHT_PERCENTILE)]
    percentile: f64,
    #[arg(long, default_value_t = HUMAN_RELATIVE_FRACTION)]
    relative_human: f64,
    #[arg(long, default_value_t = CLASSIFIER_RELATIVE_FRACTION)]
    relative_classifier: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

/// File-name-safe form of a person or class key.
fn slug(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: Args) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    match args.mode {
        Mode::Classifier => {
            let classes = classifier_heatmaps(&args)?;
            emit_classifier(&args, &classes)
        }
        Mode::Human => {
            let humans = human_heatmaps(&args)?;
            emit_human(&args, &humans)
        }
        Mode::Relative => emit_relative(&args),
        Mode::Compare => emit_compare(&args),
    }
}

struct ClassGroup {
    class_id: usize,
    maps: Vec<SaliencyMap>,
    heatmap: ClassHeatmap,
}

/// Class heatmaps keyed by class name (or index without `--model`).
fn classifier_heatmaps(args: &Args) -> anyhow::Result<BTreeMap<String, ClassGroup>> {
    let dir = args.maps_dir.as_ref().context("this mode needs --maps-dir")?;
    let maps = read_map_dir(dir).with_context(|| format!("reading maps from {}", dir.display()))?;
    if maps.is_empty() {
        bail!("no saliency maps in {}", dir.display());
    }
    let names = match &args.model {
        Some(path) => Checkpoint::load(path)
            .with_context(|| format!("loading {}", path.display()))?
            .spec()
            .class_names()
            .to_vec(),
        None => Vec::new(),
    };
    let key = |class: usize| names.get(class).cloned().unwrap_or_else(|| class.to_string());
    let mut grouped: BTreeMap<String, (usize, Vec<SaliencyMap>)> = BTreeMap::new();
    for m in maps {
        grouped.entry(key(m.class_id)).or_insert_with(|| (m.class_id, Vec::new())).1.push(m);
    }
    grouped
        .into_iter()
        .map(|(k, (class_id, maps))| {
            let heatmap = class_saliency_heatmap(&maps, args.mask_top, args.highlight_top)
                .with_context(|| format!("class {k}"))?;
            Ok((k, ClassGroup { class_id, maps, heatmap }))
        })
        .collect()
}

struct PersonGroup {
    records: Vec<AnnotationRecord>,
    heatmap: BoxHeatmap,
}

fn human_heatmaps(args: &Args) -> anyhow::Result<(BTreeMap<String, PersonGroup>, Vec<AnnotationRecord>)> {
    let path = args.annotations.as_ref().context("this mode needs --annotations")?;
    let records = load_records(path).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("no annotation records in {}", path.display());
    }
    let pool = match (&args.size, &args.images) {
        (None, Some(dir)) => Some(ImagePool::scan(dir).with_context(|| format!("scanning {}", dir.display()))?),
        (None, None) => bail!("this mode needs --size or --images to know the annotated image size"),
        (Some(_), _) => None,
    };
    let mut out = BTreeMap::new();
    for (person, recs) in group_by_person(&records) {
        let (w, h) = match (&args.size, &pool) {
            (Some(size), _) => *size,
            (None, Some(pool)) => {
                let mut size = None;
                for r in &recs {
                    let img = pool
                        .get(&r.image_id)
                        .with_context(|| format!("image {} is not in the pool", r.image_id))?;
                    match size {
                        None => size = Some((img.width, img.height)),
                        Some(s) if s != (img.width, img.height) => {
                            bail!("images of person {person} have different sizes; pass --size")
                        }
                        Some(_) => {}
                    }
                }
                size.expect("group is non-empty")
            }
            (None, None) => unreachable!("checked above"),
        };
        let heatmap = bbox_heatmap(&recs, w, h, args.percentile).with_context(|| format!("person {person}"))?;
        out.insert(person, PersonGroup { records: recs, heatmap });
    }
    Ok((out, records))
}

fn selected<'a, V>(args: &Args, groups: &'a BTreeMap<String, V>) -> anyhow::Result<Vec<(&'a String, &'a V)>> {
    let chosen: Vec<_> = groups
        .iter()
        .filter(|(k, _)| args.person.as_ref().is_none_or(|p| p == *k))
        .collect();
    if chosen.is_empty() {
        bail!("no data for person {:?}", args.person.as_deref().unwrap_or_default());
    }
    Ok(chosen)
}

fn emit_classifier(args: &Args, classes: &BTreeMap<String, ClassGroup>) -> anyhow::Result<()> {
    let mut summary = Vec::new();
    for (key, group) in selected(args, classes)? {
        let stem = args.out.join(format!("classifier_{}", slug(key)));
        render::save_heatmap(&stem.with_extension("heatmap.png"), &group.heatmap.heatmap)?;
        render::save_highlight(
            &stem.with_extension("highlight.png"),
            &group.heatmap.heatmap,
            &group.heatmap.highlight,
            None,
        )?;
        summary.push(json!({
            "class": key,
            "class_id": group.class_id,
            "maps": group.maps.len(),
            "highlight": group.heatmap.highlight.indices(),
        }));
    }
    let all: Vec<SaliencyMap> = classes.values().flat_map(|g| g.maps.iter().cloned()).collect();
    let consistency = match masked_consistency_r2(&all, args.mask_top) {
        Ok(r2) => json!({ "r_squared": r2 }),
        Err(e) => json!({ "r_squared": null, "error": e.to_string() }),
    };
    write_json(
        &args.out.join("classifier_summary.json"),
        &json!({ "classes": summary, "consistency": consistency }),
    )?;
    tracing::info!("wrote classifier heatmaps for {} classes", classes.len());
    Ok(())
}

fn emit_human(args: &Args, (persons, records): &(BTreeMap<String, PersonGroup>, Vec<AnnotationRecord>)) -> anyhow::Result<()> {
    let mut summary = Vec::new();
    let mut chosen_records = Vec::new();
    for (person, group) in selected(args, persons)? {
        let stem = args.out.join(format!("human_{}", slug(person)));
        render::save_heatmap(&stem.with_extension("heatmap.png"), &group.heatmap.counts)?;
        render::save_highlight(
            &stem.with_extension("highlight.png"),
            &group.heatmap.counts,
            &group.heatmap.highlight,
            None,
        )?;
        summary.push(json!({
            "person": person,
            "records": group.records.len(),
            "threshold": group.heatmap.threshold,
            "highlight": group.heatmap.highlight.indices(),
        }));
        chosen_records.extend(group.records.iter().cloned());
    }
    let source = if args.person.is_some() { &chosen_records } else { records };
    let histogram = balanced_label_histogram(source)?;
    write_json(&args.out.join("label_histogram.json"), &histogram)?;
    let csv = args.out.join("label_histogram.csv");
    fs::write(&csv, histogram.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_json(&args.out.join("human_summary.json"), &json!({ "persons": summary }))?;
    tracing::info!("wrote box heatmaps for {} persons", summary.len());
    Ok(())
}

fn emit_relative(args: &Args) -> anyhow::Result<()> {
    if args.maps_dir.is_none() && args.annotations.is_none() {
        bail!("relative mode needs --annotations, --maps-dir or both");
    }
    let mut sections = serde_json::Map::new();
    if args.annotations.is_some() {
        let (persons, _) = human_heatmaps(args)?;
        let heatmaps: BTreeMap<String, Tensor> = persons.into_iter().map(|(k, g)| (k, g.heatmap.counts)).collect();
        sections.insert("human".into(), relative_section(args, "human", &heatmaps, args.relative_human)?);
    }
    if args.maps_dir.is_some() {
        let classes = classifier_heatmaps(args)?;
        let heatmaps: BTreeMap<String, Tensor> = classes.into_iter().map(|(k, g)| (k, g.heatmap.heatmap)).collect();
        sections.insert(
            "classifier".into(),
            relative_section(args, "classifier", &heatmaps, args.relative_classifier)?,
        );
    }
    write_json(&args.out.join("relative_summary.json"), &sections)
}

fn relative_section(
    args: &Args,
    source: &str,
    heatmaps: &BTreeMap<String, Tensor>,
    fraction: f64,
) -> anyhow::Result<serde_json::Value> {
    let all: Vec<Tensor> = heatmaps.values().cloned().collect();
    let average = average_heatmap(&all).with_context(|| format!("averaging {source} heatmaps"))?;
    let mut entries = Vec::new();
    for (key, individual) in selected(args, heatmaps)? {
        let rel = relative_heatmap(individual, &average, fraction)?;
        let stem = args.out.join(format!("relative_{source}_{}", slug(key)));
        render::save_heatmap(&stem.with_extension("heatmap.png"), &rel.diff)?;
        render::save_highlight(&stem.with_extension("highlight.png"), &rel.diff, &rel.highlight, None)?;
        entries.push(json!({ "key": key, "fraction": fraction, "highlight": rel.highlight.indices() }));
    }
    Ok(json!({ "individuals": heatmaps.len(), "entries": entries }))
}

#[derive(Debug, Serialize)]
struct OverlapEntry {
    person: String,
    human_pixels: usize,
    classifier_pixels: usize,
    intersection: usize,
    union: usize,
    jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn emit_compare(args: &Args) -> anyhow::Result<()> {
    let (persons, _) = human_heatmaps(args)?;
    let classes = classifier_heatmaps(args)?;
    let mut scores = Vec::new();
    for (person, group) in selected(args, &persons)? {
        let Some(class) = classes.get(person) else {
            tracing::warn!("person {person} has no classifier maps; skipped");
            continue;
        };
        let human: &BinaryMask = &group.heatmap.highlight;
        let machine = &class.heatmap.highlight;
        let counts = overlap_counts(human, machine).with_context(|| format!("person {person}"))?;
        let (jaccard, error) = match counts.jaccard() {
            Ok(j) => (Some(j), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let stem = args.out.join(format!("compare_{}", slug(person)));
        render::save_highlight(&stem.with_extension("human.png"), &group.heatmap.counts, human, None)?;
        render::save_highlight(&stem.with_extension("classifier.png"), &class.heatmap.heatmap, machine, None)?;
        scores.push(OverlapEntry {
            person: person.clone(),
            human_pixels: counts.a,
            classifier_pixels: counts.b,
            intersection: counts.intersection,
            union: counts.union,
            jaccard,
            error,
        });
    }
    if scores.is_empty() {
        bail!("no person appears in both the annotations and the saliency maps");
    }
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.jaccard).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    write_json(&args.out.join("overlap.json"), &json!({ "scores": scores, "mean_jaccard": mean }))?;
    tracing::info!("wrote overlap scores for {} persons", scores.len());
    Ok(())
}

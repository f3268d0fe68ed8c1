use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use streamdec::corpus::{gen_corpus, load_corpus, write_corpus, Corpus, Utterance};
use streamdec::eval::{ablation_suite, evaluate, AblationConfig, Hypothesis};
use streamdec::model::load_checkpoint;
use streamdec::seqlayout::{
    build_bti_layout, build_mask, build_nonstreaming_layout, build_tti_layout, LayoutKind, MaskVariant,
};
use streamdec::streamdecode::decode as decode_one;
use streamdec::train::train as train_model;

use crate::config::{ExperimentConfig, Split};
use crate::error::CliError;

/// Files a command read and wrote, for the run manifest.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

fn write_file(path: &Path, body: &str) -> Result<PathBuf, CliError> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn corpus_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    let dir = cfg.inputs.corpus.as_deref().ok_or_else(|| CliError::MissingInput(PathBuf::from("--corpus")))?;
    if !dir.is_dir() {
        return Err(CliError::MissingInput(dir.to_path_buf()));
    }
    Ok(dir)
}

fn read_corpus(cfg: &ExperimentConfig, rec: &mut RunRecord) -> Result<Corpus, CliError> {
    let dir = corpus_dir(cfg)?;
    let corpus = load_corpus(dir)?;
    for name in [streamdec::corpus::MANIFEST_FILE, streamdec::corpus::TRAIN_FILE, streamdec::corpus::TEST_FILE] {
        rec.inputs.push(dir.join(name));
    }
    Ok(corpus)
}

fn split<'c>(cfg: &ExperimentConfig, corpus: &'c Corpus) -> &'c [Utterance] {
    match cfg.inputs.split {
        Split::Train => &corpus.train,
        Split::Test => &corpus.test,
    }
}

fn read_checkpoint(
    cfg: &ExperimentConfig,
    rec: &mut RunRecord,
) -> Result<streamdec::model::ModelParams<f32>, CliError> {
    let path = cfg.inputs.checkpoint.as_deref().ok_or_else(|| CliError::MissingInput(PathBuf::from("--checkpoint")))?;
    if !path.is_file() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let params = load_checkpoint(path)?;
    rec.inputs.push(path.to_path_buf());
    rec.inputs.push(path.with_extension("bin"));
    Ok(params)
}

pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let corpus = gen_corpus(&cfg.corpus)?;
    let artifacts = write_corpus(&corpus, out)?;
    Ok(RunRecord { inputs: vec![], artifacts })
}

fn write_report(report: &streamdec::eval::EvalReport, out: &Path, rec: &mut RunRecord) -> Result<(), CliError> {
    rec.artifacts.push(write_file(&out.join("eval.tsv"), &report.to_tsv())?);
    rec.artifacts.push(write_file(&out.join("eval.md"), &report.to_markdown())?);
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let mut rec = RunRecord::default();
    let corpus = read_corpus(cfg, &mut rec)?;
    let model = cfg.model.with_vocab(corpus.vocab());
    let tc = cfg.train_config();
    let outcome = train_model(&tc, &corpus, &model, Some(out))?;
    for ck in &outcome.report.checkpoints {
        rec.artifacts.push(ck.clone());
        rec.artifacts.push(ck.with_extension("bin"));
    }
    rec.artifacts.push(out.join("metrics.tsv"));
    let (report, _) = evaluate(&outcome.params, corpus.vocab(), split(cfg, &corpus), &tc.decode)?;
    write_report(&report, out, &mut rec)?;
    Ok(rec)
}

pub fn decode(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let mut rec = RunRecord::default();
    let params = read_checkpoint(cfg, &mut rec)?;
    let corpus = read_corpus(cfg, &mut rec)?;
    if params.config().vocab != corpus.vocab() {
        return Err(streamdec::Error::VocabMismatch("checkpoint and corpus vocabularies differ".into()).into());
    }
    let path = out.join("hyps.jsonl");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for utt in split(cfg, &corpus) {
        let o = decode_one(&params, &utt.speech, &cfg.decode)?;
        let h = Hypothesis { id: utt.id.clone(), text: o.text, events: o.events };
        let line = serde_json::to_string(&h).expect("hypothesis serializes");
        writeln!(w, "{line}").map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    rec.artifacts.push(path);
    Ok(rec)
}

pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let mut rec = RunRecord::default();
    let params = read_checkpoint(cfg, &mut rec)?;
    let corpus = read_corpus(cfg, &mut rec)?;
    let (report, _) = evaluate(&params, corpus.vocab(), split(cfg, &corpus), &cfg.decode)?;
    write_report(&report, out, &mut rec)?;
    Ok(rec)
}

pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let mut corpus = cfg.corpus.clone();
    if let Some(p) = cfg.ablation.p_sub {
        corpus.p_sub = p;
    }
    let model = cfg.model.with_vocab(corpus.vocab);
    let ac = AblationConfig {
        corpus,
        model,
        train: cfg.train_config(),
        seeds: cfg.ablation.seeds.clone(),
        variants: cfg.ablation.variants.clone(),
    };
    let table = ablation_suite(&ac)?;
    Ok(RunRecord { inputs: vec![], artifacts: table.write(out)? })
}

fn parse_variant(name: &str) -> Result<MaskVariant, CliError> {
    match name {
        "global" => Ok(MaskVariant::Global),
        "causal" => Ok(MaskVariant::Causal),
        "right_chunk" | "right-chunk" => Ok(MaskVariant::RightChunk),
        other => Err(CliError::Config(format!("unknown mask variant `{other}`"))),
    }
}

pub fn masks_dump(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, CliError> {
    let mut rec = RunRecord::default();
    let corpus = read_corpus(cfg, &mut rec)?;
    let all = corpus.train.iter().chain(&corpus.test);
    let utt = match &cfg.inputs.utt {
        Some(id) => all
            .clone()
            .find(|u| &u.id == id)
            .ok_or_else(|| CliError::Config(format!("utterance `{id}` not in corpus")))?,
        None => all.clone().next().ok_or_else(|| CliError::Config("corpus is empty".into()))?,
    };
    let tc = cfg.train_config();
    let vocab = corpus.vocab();
    let layout = match tc.layout {
        LayoutKind::Bti => build_bti_layout(utt, tc.delta_policy, tc.text_positions, &vocab)?,
        LayoutKind::Tti => build_tti_layout(utt, tc.tti_delay, &vocab)?,
        LayoutKind::NonStreaming => build_nonstreaming_layout(utt, &vocab)?,
    };
    let variant = match &cfg.inputs.variant {
        Some(v) => parse_variant(v)?,
        None => tc.mask_variant(),
    };
    let mask = build_mask(&layout, variant)?;
    rec.artifacts.push(write_file(&out.join("mask.pbm"), &mask.to_pbm())?);
    rec.artifacts.push(write_file(&out.join("mask.csv"), &mask.to_csv())?);
    Ok(rec)
}

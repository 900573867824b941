//! Local stand-in for a text generation endpoint. Speaks the same wire
//! protocol as the real thing: `POST {"prompt": ...}` -> `{"text": ...}`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use finqa_core::llmgen::stub::{lookup_answer, StubReply, StubServer};

#[derive(Parser)]
#[command(name = "finqa-stub", version, about = "Canned-answer generator server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    /// JSON object mapping question text to answer text.
    #[arg(long)]
    answers: Option<PathBuf>,
    /// Reply used when no question matches.
    #[arg(long, default_value = "0")]
    fallback: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let answers: BTreeMap<String, String> = match &args.answers {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).context("answers file must be a JSON object of strings")?
        }
        None => BTreeMap::new(),
    };
    let fallback = args.fallback;
    let server = StubServer::bind(&args.addr, move |prompt| {
        StubReply::Text(lookup_answer(&answers, prompt).unwrap_or(&fallback).to_string())
    })
    .with_context(|| format!("binding {}", args.addr))?;
    log::info!("serving on {}", server.url());
    server.join();
    Ok(())
}

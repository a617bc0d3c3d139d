//! File formats: checkpoints, latent files, WAV, configuration, metrics and
//! the synthetic corpus.

mod checkpoint;
mod config;
mod corpus;
mod kv;
mod latent_file;
mod metrics;
mod wav;

pub use checkpoint::{
    checkpoint_bytes, parse_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, Training, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    apply_corpus_key, apply_model_key, apply_train_key, corpus_to_kv, model_to_kv, train_to_kv,
    DataSource, RunConfig,
};
pub use corpus::{
    clip_name, synthesize_clip, synthesize_corpus, write_corpus, CorpusSpec, MANIFEST_NAME,
};
pub use kv::KeyValues;
pub use latent_file::{millihz, LatentFile, FLAG_COMPACT, LATENT_MAGIC, LATENT_VERSION};
pub use metrics::MetricsLog;
pub use wav::{read_wav, read_wav_dir, wav_files, write_wav, WavFormat};

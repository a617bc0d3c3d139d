//! Single-file archive: a header line `RAVE-CHECKPOINT <version> <bytes>`,
//! a `key=value` manifest of that many bytes, then the little-endian tensor
//! payload. Each `tensor.N` entry reads `name dtype shape offset bytes`.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{apply_model_key, apply_train_key, model_to_kv, train_to_kv};
use super::kv::{parse_list, parse_value, KeyValues};
use crate::autograd::{Adam, ParamStore};
use crate::error::{Error, Result};
use crate::latent::FidelityBasis;
use crate::model::{ModelConfig, Rave};
use crate::pqmf::{PqmfBank, PrototypeFilter};
use crate::train::{TrainConfig, TrainState, Trainer};

pub const CHECKPOINT_MAGIC: &str = "RAVE-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training configuration and optimizer/RNG state.
#[derive(Debug, Clone)]
pub struct Training {
    pub config: TrainConfig,
    pub state: TrainState,
}

pub struct Checkpoint {
    pub model: Rave,
    pub training: Option<Training>,
    pub basis: Option<FidelityBasis>,
}

impl Checkpoint {
    pub fn into_trainer(self) -> Result<Trainer> {
        let t = self
            .training
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        Ok(Trainer {
            model: self.model,
            config: t.config,
            state: t.state,
        })
    }
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

struct Writer<'a> {
    entries: Vec<(String, Vec<usize>, Payload<'a>)>,
}

impl<'a> Writer<'a> {
    fn f32(&mut self, name: String, shape: &[usize], data: &'a [f32]) {
        self.entries
            .push((name, shape.to_vec(), Payload::F32(data)));
    }

    fn f64(&mut self, name: String, shape: &[usize], data: &'a [f64]) {
        self.entries
            .push((name, shape.to_vec(), Payload::F64(data)));
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format(format!("bad hex string {s:?}")));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format(format!("bad hex string {s:?}")))
        })
        .collect()
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

const ADAM_GROUPS: [&str; 3] = ["encoder", "decoder", "discriminator"];

fn adams(state: &TrainState) -> [&Adam; 3] {
    [
        &state.encoder_opt,
        &state.decoder_opt,
        &state.discriminator_opt,
    ]
}

/// Serializes a model with optional training state and fidelity basis.
pub fn checkpoint_bytes(
    model: &Rave,
    training: Option<(&TrainConfig, &TrainState)>,
    basis: Option<&FidelityBasis>,
) -> Result<Vec<u8>> {
    let mut kv = KeyValues::default();
    model_to_kv(&model.config, &mut kv, "model.");
    let proto = model.pqmf.prototype();
    kv.push("pqmf.kaiser_beta", proto.kaiser_beta);
    kv.push("pqmf.cutoff", proto.cutoff);
    let mut w = Writer {
        entries: Vec::new(),
    };
    w.f64("pqmf/prototype".into(), &[proto.len()], &proto.taps);
    for e in model.params.entries() {
        w.f32(format!("param/{}", e.name), e.value.shape(), e.value.data());
    }
    if let Some((cfg, st)) = training {
        train_to_kv(cfg, &mut kv, "train.");
        kv.push("state.step", st.step);
        kv.push(
            "state.stage",
            if st.stage2_start.is_some() || st.step >= cfg.stage1_steps {
                2
            } else {
                1
            },
        );
        kv.push(
            "state.stage2_start",
            st.stage2_start
                .map_or_else(|| "none".to_string(), |s| s.to_string()),
        );
        kv.push("state.rng_seed", hex(&st.rng.get_seed()));
        kv.push("state.rng_stream", st.rng.get_stream());
        kv.push("state.rng_word_pos", st.rng.get_word_pos());
        let hist: Vec<String> = st.history.iter().map(ToString::to_string).collect();
        kv.push("state.history", hist.join(","));
        for (group, adam) in ADAM_GROUPS.iter().zip(adams(st)) {
            kv.push(&format!("state.adam.{group}.step"), adam.step);
            let (m, v) = adam.moments();
            for ((id, mi), vi) in adam.params().iter().zip(m).zip(v) {
                let name = model.params.name(*id);
                w.f32(format!("adam/{group}/m/{name}"), &[mi.len()], mi);
                w.f32(format!("adam/{group}/v/{name}"), &[vi.len()], vi);
            }
        }
    }
    kv.push("basis", if basis.is_some() { "present" } else { "absent" });
    if let Some(b) = basis {
        let d = b.dim();
        w.f64("basis/mean".into(), &[d], &b.mean);
        w.f64("basis/components".into(), &[d, d], &b.components);
        w.f64("basis/singular_values".into(), &[d], &b.singular_values);
    }
    let mut payload = Vec::new();
    for (i, (name, shape, data)) in w.entries.iter().enumerate() {
        let offset = payload.len();
        let dtype = match data {
            Payload::F32(d) => {
                d.iter()
                    .for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
                "f32"
            }
            Payload::F64(d) => {
                d.iter()
                    .for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
                "f64"
            }
        };
        let bytes = payload.len() - offset;
        kv.push(
            &format!("tensor.{i}"),
            format!("{name} {dtype} {} {offset} {bytes}", shape_str(shape)),
        );
    }
    let manifest = kv.render();
    let mut out = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {}\n",
        manifest.len()
    )
    .into_bytes();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes through a temporary file and a rename.
pub fn write_checkpoint(
    path: &Path,
    model: &Rave,
    training: Option<(&TrainConfig, &TrainState)>,
    basis: Option<&FidelityBasis>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, training, basis)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(
    path: &Path,
    trainer: &Trainer,
    basis: Option<&FidelityBasis>,
) -> Result<()> {
    write_checkpoint(
        path,
        &trainer.model,
        Some((&trainer.config, &trainer.state)),
        basis,
    )
}

struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

struct Reader<'a> {
    payload: &'a [u8],
    table: std::collections::BTreeMap<String, TensorEntry>,
}

impl Reader<'_> {
    fn entry(&self, name: &str, dtype: &str) -> Result<(&TensorEntry, &[u8])> {
        let e = self
            .table
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if e.dtype != dtype {
            return Err(Error::Format(format!(
                "tensor {name} is {}, expected {dtype}",
                e.dtype
            )));
        }
        Ok((e, &self.payload[e.offset..e.offset + e.bytes]))
    }

    fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (e, raw) = self.entry(name, "f32")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        Ok((e.shape.clone(), data))
    }

    fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (e, raw) = self.entry(name, "f64")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        Ok((e.shape.clone(), data))
    }
}

fn required<'a>(kv: &'a KeyValues, key: &str) -> Result<&'a str> {
    kv.get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint manifest is missing {key}")))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is missing".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("checkpoint header is not text".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version: u32 = parts[1]
        .parse()
        .map_err(|_| Error::Format("bad checkpoint version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mlen: usize = parts[2]
        .parse()
        .map_err(|_| Error::Format("bad manifest length".into()))?;
    let start = nl + 1;
    if bytes.len() < start + mlen {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let manifest = std::str::from_utf8(&bytes[start..start + mlen])
        .map_err(|_| Error::Format("manifest is not text".into()))?;
    let kv = KeyValues::parse(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let payload = &bytes[start + mlen..];

    let mut table = std::collections::BTreeMap::new();
    let mut covered = 0usize;
    for (k, v) in &kv.pairs {
        if !k.starts_with("tensor.") {
            continue;
        }
        let f: Vec<&str> = v.split(' ').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("bad tensor entry {v:?}")));
        }
        let shape: Vec<usize> = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split('x')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Format(format!("bad shape in {v:?}")))
                })
                .collect::<Result<_>>()?
        };
        let offset: usize = f[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad offset in {v:?}")))?;
        let nbytes: usize = f[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad size in {v:?}")))?;
        let width = match f[1] {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        if shape.iter().product::<usize>() * width != nbytes
            || offset != covered
            || offset + nbytes > payload.len()
        {
            return Err(Error::Format(format!(
                "tensor {} does not match the payload",
                f[0]
            )));
        }
        covered += nbytes;
        table.insert(
            f[0].to_string(),
            TensorEntry {
                dtype: f[1].to_string(),
                shape,
                offset,
                bytes: nbytes,
            },
        );
    }
    if covered != payload.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, tensor table describes {covered}",
            payload.len()
        )));
    }
    let r = Reader { payload, table };

    let mut cfg = ModelConfig::desk();
    let mut n_model = 0;
    for (k, v) in &kv.pairs {
        if let Some(rest) = k.strip_prefix("model.") {
            if !apply_model_key(&mut cfg, rest, v)? {
                return Err(Error::Format(format!("unknown manifest key {k}")));
            }
            n_model += 1;
        }
    }
    let mut reference = KeyValues::default();
    model_to_kv(&cfg, &mut reference, "");
    if n_model != reference.pairs.len() {
        return Err(Error::Format(
            "checkpoint manifest has an incomplete model config".into(),
        ));
    }
    let (_, taps) = r.f64("pqmf/prototype")?;
    let proto = PrototypeFilter {
        taps,
        kaiser_beta: parse_value("pqmf.kaiser_beta", required(&kv, "pqmf.kaiser_beta")?)?,
        cutoff: parse_value("pqmf.cutoff", required(&kv, "pqmf.cutoff")?)?,
    };
    let bank = PqmfBank::new(proto, cfg.bands)?;
    let mut model = Rave::with_bank(cfg, bank)?;
    load_params(&mut model.params, &r)?;

    let training = if kv.get("state.step").is_some() {
        let mut config = TrainConfig::desk(model.config.sample_rate);
        for (k, v) in &kv.pairs {
            if let Some(rest) = k.strip_prefix("train.") {
                if !apply_train_key(&mut config, rest, v)? {
                    return Err(Error::Format(format!("unknown manifest key {k}")));
                }
            }
        }
        let step = parse_value("state.step", required(&kv, "state.step")?)?;
        let s2 = required(&kv, "state.stage2_start")?;
        let stage2_start = if s2 == "none" {
            None
        } else {
            Some(parse_value("state.stage2_start", s2)?)
        };
        let seed: [u8; 32] = unhex(required(&kv, "state.rng_seed")?)?
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse_value(
            "state.rng_stream",
            required(&kv, "state.rng_stream")?,
        )?);
        rng.set_word_pos(parse_value(
            "state.rng_word_pos",
            required(&kv, "state.rng_word_pos")?,
        )?);
        let history: VecDeque<f64> =
            parse_list::<f64>("state.history", required(&kv, "state.history")?)?.into();
        let groups = [
            model.encoder_params(),
            model.decoder_params(),
            model.discriminator_params(),
        ];
        let mut opts = Vec::new();
        for (group, ids) in ADAM_GROUPS.iter().zip(groups) {
            let mut adam = Adam::new(config.adam, &model.params, ids);
            let key = format!("state.adam.{group}.step");
            let astep = parse_value(&key, required(&kv, &key)?)?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for id in adam.params() {
                let name = model.params.name(*id);
                m.push(r.f32(&format!("adam/{group}/m/{name}"))?.1);
                v.push(r.f32(&format!("adam/{group}/v/{name}"))?.1);
            }
            adam.set_moments(astep, m, v)?;
            opts.push(adam);
        }
        let discriminator_opt = opts.pop().expect("three groups");
        let decoder_opt = opts.pop().expect("three groups");
        let encoder_opt = opts.pop().expect("three groups");
        Some(Training {
            config,
            state: TrainState {
                step,
                stage2_start,
                rng,
                encoder_opt,
                decoder_opt,
                discriminator_opt,
                history,
            },
        })
    } else {
        None
    };

    let basis = match required(&kv, "basis")? {
        "present" => {
            let b = FidelityBasis {
                mean: r.f64("basis/mean")?.1,
                components: r.f64("basis/components")?.1,
                singular_values: r.f64("basis/singular_values")?.1,
            };
            b.validate()?;
            if b.dim() != model.config.latent_dim {
                return Err(Error::Format(
                    "basis dimension differs from the latent dimension".into(),
                ));
            }
            Some(b)
        }
        "absent" => None,
        other => return Err(Error::Format(format!("bad basis flag {other:?}"))),
    };
    Ok(Checkpoint {
        model,
        training,
        basis,
    })
}

fn load_params(store: &mut ParamStore<f32>, r: &Reader<'_>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("param/{}", store.name(id));
        let (shape, data) = r.f32(&name)?;
        store
            .set(id, crate::autograd::Tensor::from_vec(&shape, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let expected = store.len();
    let stored = r.table.keys().filter(|k| k.starts_with("param/")).count();
    if stored != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {stored} parameters, model has {expected}"
        )));
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! The complete codec: transforms, quantizer, the MoG entropy model used
//! in training and the post model used for coding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::coder::{decode_stream, encode_stream, DecodeMode, Header};
use crate::entropy::{EntropyConfig, EntropyModel, HeadKind};
use crate::error::{Error, Result};
use crate::infer::CodingModel;
use crate::params::{decode_model, encode_model, model_hash, write_atomic};
use crate::quantizer::{CodeBlock, Quantizer};
use crate::tensor::Tensor;
use crate::transforms::{crop, pad_replicate, Analysis, Synthesis, TransformConfig};

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub analysis: Analysis,
    pub synthesis: Synthesis,
    pub quantizer: Quantizer,
    pub entropy: EntropyModel,
    pub post: Option<EntropyModel>,
}

impl CodecModel {
    pub fn new(tcfg: TransformConfig, mut ecfg: EntropyConfig, rng: &mut impl Rng) -> Result<Self> {
        ecfg.m = tcfg.m;
        let analysis = Analysis::new(tcfg.clone(), rng)?;
        let synthesis = Synthesis::new(tcfg.clone(), rng)?;
        let quantizer = Quantizer::new(tcfg.m, ecfg.levels);
        let entropy = EntropyModel::new(ecfg, HeadKind::Mog, quantizer.all_centers(), rng)?;
        Ok(Self {
            analysis,
            synthesis,
            quantizer,
            entropy,
            post: None,
        })
    }

    pub fn transform_config(&self) -> &TransformConfig {
        &self.analysis.cfg
    }

    /// Creates the post model, copying every backbone tensor from the
    /// MoG model so training starts from the learned context features.
    pub fn init_post(&mut self, cfg: Option<EntropyConfig>, rng: &mut impl Rng) -> Result<()> {
        let cfg = cfg.unwrap_or_else(|| self.entropy.cfg.clone());
        let mut post = EntropyModel::new(cfg, HeadKind::Post, self.quantizer.all_centers(), rng)?;
        post.params.copy_matching(&self.entropy.params);
        self.post = Some(post);
        Ok(())
    }

    /// Pushes the quantizer's current centers into both entropy models.
    pub fn sync_centers(&mut self) -> Result<()> {
        let c = self.quantizer.all_centers();
        self.entropy.set_centers(c.clone())?;
        if let Some(p) = self.post.as_mut() {
            p.set_centers(c)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut recs = vec![
            ("meta.transform".to_string(), self.analysis.cfg.to_meta()),
            ("meta.entropy".to_string(), self.entropy.cfg.to_meta(HeadKind::Mog)),
        ];
        if let Some(p) = &self.post {
            recs.push(("meta.post".to_string(), p.cfg.to_meta(HeadKind::Post)));
        }
        recs.extend(self.analysis.params.to_records("ga."));
        recs.extend(self.synthesis.params.to_records("gs."));
        recs.extend(self.quantizer.params.to_records("q."));
        recs.extend(self.entropy.params.to_records("ge."));
        if let Some(p) = &self.post {
            recs.extend(p.params.to_records("post."));
        }
        encode_model(&recs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let recs = decode_model(bytes)?;
        let meta = |k: &str| -> Result<&Tensor> {
            recs.get(k)
                .ok_or_else(|| Error::Format(format!("model file lacks {k}")))
        };
        let tcfg = TransformConfig::from_meta(meta("meta.transform")?)?;
        let (ecfg, _) = EntropyConfig::from_meta(meta("meta.entropy")?)?;
        if ecfg.m != tcfg.m {
            return Err(Error::Format("entropy model and transforms disagree on M".into()));
        }
        // architecture only; every value is overwritten below
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut model = Self::new(tcfg, ecfg, &mut rng)?;
        model.analysis.params.load_records("ga.", &recs)?;
        model.synthesis.params.load_records("gs.", &recs)?;
        model.quantizer.params.load_records("q.", &recs)?;
        model.entropy.params.load_records("ge.", &recs)?;
        if let Some(t) = recs.get("meta.post") {
            let (pcfg, _) = EntropyConfig::from_meta(t)?;
            if pcfg.m != model.entropy.cfg.m || pcfg.levels != model.entropy.cfg.levels {
                return Err(Error::Format("post model disagrees with the quantizer".into()));
            }
            let mut post = EntropyModel::new(pcfg, HeadKind::Post, model.quantizer.all_centers(), &mut rng)?;
            post.params.load_records("post.", &recs)?;
            model.post = Some(post);
        }
        check_all_present(&recs, &model)?;
        model.sync_centers()?;
        Ok(model)
    }

    pub fn hash(&self) -> Result<u64> {
        Ok(model_hash(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::error::read_file(path)?)
    }

    pub fn coding_model(&self) -> Result<CodingModel> {
        let post = self
            .post
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no post entropy model; run train-post first".into()))?;
        CodingModel::compile(post)
    }

    /// Code block of a `[1, 3, H, W]` image (padded internally).
    pub fn codes(&self, img: &Tensor) -> Result<CodeBlock> {
        let (padded, _) = pad_replicate(img, 8)?;
        let z = self.analysis.run(&padded)?;
        let (mut blocks, _) = self.quantizer.quantize(&z)?;
        Ok(blocks.remove(0))
    }

    /// Decoded image of `y`, cropped to `dims` and clamped to `[0, 1]`.
    pub fn reconstruct(&self, y: &CodeBlock, dims: (usize, usize)) -> Result<Tensor> {
        let yv = self.quantizer.dequantize(std::slice::from_ref(y))?;
        let x = self.synthesis.run(&yv)?;
        Ok(crop(&x, dims.0, dims.1)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn encode_image(&self, img: &Tensor) -> Result<Vec<u8>> {
        let s = img.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::Dimension(format!("encode expects [1, 3, H, W], got {s:?}")));
        }
        let cm = self.coding_model()?;
        let y = self.codes(img)?;
        encode_stream(&y, &cm, (s[2], s[3]), self.hash()?)
    }

    pub fn decode_bytes(&self, bytes: &[u8]) -> Result<(Header, CodeBlock, Tensor)> {
        let cm = self.coding_model()?;
        let (h, y) = decode_stream(bytes, &cm, self.hash()?, DecodeMode::GroupParallel)?;
        let x = self.reconstruct(&y, (h.height as usize, h.width as usize))?;
        Ok((h, y, x))
    }
}

fn check_all_present(recs: &BTreeMap<String, Tensor>, model: &CodecModel) -> Result<()> {
    let mut expected = 2 + model.analysis.params.len()
        + model.synthesis.params.len()
        + model.quantizer.params.len()
        + model.entropy.params.len();
    if let Some(p) = &model.post {
        expected += 1 + p.params.len();
    }
    if recs.len() != expected {
        return Err(Error::Format(format!(
            "model file has {} tensors, architecture expects {expected}",
            recs.len()
        )));
    }
    Ok(())
}

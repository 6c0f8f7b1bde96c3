//! Full network assembly: shared-MLP backbone, two graph-embedding stages,
//! the pyramid branch, and the task heads, with ablation switches that swap
//! either operator for a width-matching linear layer.

pub mod metrics;

use std::cell::RefCell;
use std::rc::Rc;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::gem::{gem_forward, GemConfig, KRule};
use crate::nn::BatchNorm;
use crate::pan::{pan_collapse, PanModule, PyramidConfig};
use crate::tensor::{ops, truncated_normal, Rng64, Scalar, Tensor};

/// Weight scale for hidden layers.
pub const INIT_STD: f64 = 0.1;
/// The final head layer starts near zero so untrained logits stay close to
/// uniform and the initial loss sits at ln(P).
pub const FINAL_LAYER_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub n_points: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub enable_gem: bool,
    pub enable_pan: bool,
    pub k_rule: KRule,
    pub use_correlation: bool,
    pub stem_width: usize,
    pub mlp_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub cls_shortcuts: Vec<usize>,
    pub seg_shortcuts: Vec<usize>,
    pub pyramid: PyramidConfig,
    pub dropout_keep: f64,
    pub free_form: bool,
    pub seed: u64,
}

impl ModelConfig {
    fn base(task: Task, n_points: usize, in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            task,
            n_points,
            in_channels,
            num_classes,
            enable_gem: true,
            enable_pan: true,
            k_rule: KRule::CeilFOver4,
            use_correlation: false,
            stem_width: 32,
            mlp_widths: vec![64, 128, 256, 512],
            head_widths: vec![512, 256],
            cls_shortcuts: vec![2],
            seg_shortcuts: vec![0, 1, 2],
            pyramid: PyramidConfig::default(),
            dropout_keep: 0.65,
            free_form: false,
            seed: 0,
        }
    }

    /// 1024 points, xyz only.
    pub fn reference_classification(num_classes: usize) -> Self {
        Self::base(Task::Classification, 1024, 3, num_classes)
    }

    /// 2048 points, xyz only, per-point part labels.
    pub fn reference_part_seg(num_classes: usize) -> Self {
        Self::base(Task::PartSeg, 2048, 3, num_classes)
    }

    /// 4096 points, 9 channels, 13 classes.
    pub fn reference_scene_seg() -> Self {
        Self::base(Task::SceneSeg, 4096, 9, 13)
    }

    /// Free-form configuration for desk-scale experiments.
    pub fn free_form(task: Task, n_points: usize, in_channels: usize, num_classes: usize) -> Self {
        let mut cfg = Self::base(task, n_points, in_channels, num_classes);
        cfg.free_form = true;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !self.free_form {
            let ok = match self.task {
                Task::Classification => self.n_points == 1024 && self.in_channels == 3,
                Task::PartSeg => self.n_points == 2048 && self.in_channels == 3,
                Task::SceneSeg => {
                    self.n_points == 4096 && self.in_channels == 9 && self.num_classes == 13
                }
            };
            if !ok {
                return Err(Error::config(format!(
                    "(task={}, N={}, F={}, P={}) is not a reference configuration; \
                     use free-form mode for custom shapes",
                    self.task.name(),
                    self.n_points,
                    self.in_channels,
                    self.num_classes
                )));
            }
        }
        if self.n_points < 2 {
            return Err(Error::config("model needs at least 2 points per cloud"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        if self.mlp_widths.is_empty() || self.head_widths.is_empty() {
            return Err(Error::config("mlp_widths and head_widths must be non-empty"));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return Err(Error::config(format!(
                "dropout keep probability must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        let shortcuts = match self.task {
            Task::Classification => &self.cls_shortcuts,
            _ => &self.seg_shortcuts,
        };
        for &i in shortcuts {
            if i >= self.mlp_widths.len() {
                return Err(Error::config(format!(
                    "shortcut index {} out of range for {} backbone layers",
                    i,
                    self.mlp_widths.len()
                )));
            }
        }
        if let KRule::Fixed(k) = self.k_rule {
            if k == 0 || k >= self.n_points {
                return Err(Error::config(format!(
                    "fixed k={} outside [1, {}]",
                    k,
                    self.n_points - 1
                )));
            }
        }
        self.pyramid.validate(!self.free_form)?;
        Ok(())
    }

    pub fn splice_width(&self) -> usize {
        2 * self.stem_width
    }

    pub fn concat_width(&self) -> usize {
        self.mlp_widths.last().copied().unwrap_or(0) + self.pyramid.fused_channels()
    }

    pub fn gem2_output_width(&self) -> usize {
        2 * self.concat_width()
    }

    pub fn head_input_width(&self) -> usize {
        let shortcuts = match self.task {
            Task::Classification => &self.cls_shortcuts,
            _ => &self.seg_shortcuts,
        };
        self.gem2_output_width() + shortcuts.iter().map(|&i| self.mlp_widths[i]).sum::<usize>()
    }

    /// Flat key=value form, embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let k_rule = match self.k_rule {
            KRule::CeilFOver4 => "ceil_f_over_4".to_string(),
            KRule::Fixed(k) => format!("fixed:{}", k),
        };
        let mut lines = vec![
            format!("task={}", self.task.name()),
            format!("n_points={}", self.n_points),
            format!("in_channels={}", self.in_channels),
            format!("num_classes={}", self.num_classes),
            format!("enable_gem={}", self.enable_gem),
            format!("enable_pan={}", self.enable_pan),
            format!("k_rule={}", k_rule),
            format!("use_correlation={}", self.use_correlation),
            format!("stem_width={}", self.stem_width),
            format!("mlp_widths={}", list(&self.mlp_widths)),
            format!("head_widths={}", list(&self.head_widths)),
            format!("cls_shortcuts={}", list(&self.cls_shortcuts)),
            format!("seg_shortcuts={}", list(&self.seg_shortcuts)),
            format!("pyramid_kernels={}", list(&self.pyramid.branch_kernels)),
            format!("pyramid_strides={}", list(&self.pyramid.branch_strides)),
            format!("pyramid_channels={}", list(&self.pyramid.branch_channels)),
            format!("dropout_keep={}", self.dropout_keep),
            format!("free_form={}", self.free_form),
            format!("seed={}", self.seed),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config line '{}'", line)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::config(format!("config missing key '{}'", k)))
        };
        let usize_of = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("config key '{}' must be an integer", k)))
        };
        let bool_of = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("config key '{}' must be true/false", k)))
        };
        let list_of = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("config key '{}' has a bad entry", k)))
                })
                .collect()
        };
        let arr4 = |k: &str| -> Result<[usize; 4]> {
            let v = list_of(k)?;
            v.try_into()
                .map_err(|_| Error::config(format!("config key '{}' needs exactly 4 entries", k)))
        };
        let k_rule_text = get("k_rule")?;
        let k_rule = if k_rule_text == "ceil_f_over_4" {
            KRule::CeilFOver4
        } else if let Some(rest) = k_rule_text.strip_prefix("fixed:") {
            KRule::Fixed(rest.parse().map_err(|_| {
                Error::config(format!("bad fixed k value '{}'", rest))
            })?)
        } else {
            return Err(Error::config(format!("unknown k_rule '{}'", k_rule_text)));
        };
        Ok(ModelConfig {
            task: Task::parse(get("task")?)?,
            n_points: usize_of("n_points")?,
            in_channels: usize_of("in_channels")?,
            num_classes: usize_of("num_classes")?,
            enable_gem: bool_of("enable_gem")?,
            enable_pan: bool_of("enable_pan")?,
            k_rule,
            use_correlation: bool_of("use_correlation")?,
            stem_width: usize_of("stem_width")?,
            mlp_widths: list_of("mlp_widths")?,
            head_widths: list_of("head_widths")?,
            cls_shortcuts: list_of("cls_shortcuts")?,
            seg_shortcuts: list_of("seg_shortcuts")?,
            pyramid: PyramidConfig {
                branch_kernels: arr4("pyramid_kernels")?,
                branch_strides: arr4("pyramid_strides")?,
                branch_channels: arr4("pyramid_channels")?,
            },
            dropout_keep: get("dropout_keep")?
                .parse()
                .map_err(|_| Error::config("dropout_keep must be a number"))?,
            free_form: bool_of("free_form")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::config("seed must be an integer"))?,
        })
    }
}

/// Shared per-point linear map.
pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn new(cin: usize, cout: usize, std: f64, rng: &mut Rng64) -> Self {
        Linear {
            w: truncated_normal(vec![cin, cout], std, rng),
            b: Tensor::param(vec![cout], vec![T::zero(); cout]).expect("consistent"),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::pointwise_linear(x, &self.w, &self.b)
    }
}

/// Linear + batch-norm + ReLU, the standard layer of every MLP stage.
pub struct PointBlock<T: Scalar> {
    pub lin: Linear<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> PointBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut Rng64) -> Self {
        PointBlock {
            lin: Linear::new(cin, cout, INIT_STD, rng),
            bn: BatchNorm::new(cout),
        }
    }

    fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(ops::relu(&self.bn.forward(&self.lin.forward(x)?, training)?))
    }
}

enum GemStage<T: Scalar> {
    Gem(GemConfig),
    Sub(PointBlock<T>),
}

enum PanStage<T: Scalar> {
    Pan(PanModule<T>),
    Sub(PointBlock<T>),
}

enum Head<T: Scalar> {
    Cls {
        blocks: Vec<PointBlock<T>>,
        out: Linear<T>,
    },
    Seg {
        blocks: Vec<PointBlock<T>>,
        out: Linear<T>,
    },
}

/// Named intermediate results keyed by dataflow stage. Shapes are the
/// logical per-batch shapes of the architecture diagram; tensors, where one
/// exists as a single buffer, use a flattened row layout.
pub struct ForwardTrace<T: Scalar> {
    entries: Vec<TraceEntry<T>>,
}

pub struct TraceEntry<T: Scalar> {
    pub stage: &'static str,
    pub shape: Vec<usize>,
    pub tensor: Option<Tensor<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    fn new() -> Self {
        ForwardTrace {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, stage: &'static str, shape: Vec<usize>, tensor: Option<Tensor<T>>) {
        self.entries.push(TraceEntry {
            stage,
            shape,
            tensor,
        });
    }

    pub fn entries(&self) -> &[TraceEntry<T>] {
        &self.entries
    }

    pub fn shape(&self, stage: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|e| e.stage == stage)
            .map(|e| e.shape.as_slice())
    }

    pub fn has(&self, stage: &str) -> bool {
        self.entries.iter().any(|e| e.stage == stage)
    }

    pub fn tensor(&self, stage: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|e| e.stage == stage)
            .and_then(|e| e.tensor.as_ref())
    }

    pub fn logits(&self) -> Result<&Tensor<T>> {
        self.tensor("logits")
            .ok_or_else(|| Error::internal("trace is missing the logits stage"))
    }

    /// One `stage shape` line per entry, for shape audits.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let dims = e
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!("{} {}\n", e.stage, dims));
        }
        out
    }
}

/// The assembled network. Parameters live behind shared handles, so forward
/// passes borrow the model immutably and the optimizer updates in place.
pub struct PyramNet<T: Scalar> {
    pub cfg: ModelConfig,
    stem: PointBlock<T>,
    gem1: GemStage<T>,
    top: Vec<PointBlock<T>>,
    pan: PanStage<T>,
    gem2: GemStage<T>,
    head: Head<T>,
}

impl<T: Scalar> PyramNet<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = Rng64::seed_from_u64(cfg.seed);
        let splice = cfg.splice_width();

        let stem = PointBlock::new(cfg.in_channels, cfg.stem_width, &mut rng);
        let gem_cfg = GemConfig {
            k_rule: cfg.k_rule,
            use_correlation: cfg.use_correlation,
        };
        let gem1 = if cfg.enable_gem {
            GemStage::Gem(gem_cfg)
        } else {
            GemStage::Sub(PointBlock::new(cfg.stem_width, splice, &mut rng))
        };

        let mut top = Vec::with_capacity(cfg.mlp_widths.len());
        let mut cin = splice;
        for &w in &cfg.mlp_widths {
            top.push(PointBlock::new(cin, w, &mut rng));
            cin = w;
        }

        let fused = cfg.pyramid.fused_channels();
        let pan = if cfg.enable_pan {
            PanStage::Pan(PanModule::new(
                cfg.pyramid.clone(),
                !cfg.free_form,
                INIT_STD,
                &mut rng,
            )?)
        } else {
            PanStage::Sub(PointBlock::new(splice, fused, &mut rng))
        };

        let concat_w = cfg.concat_width();
        let gem2 = if cfg.enable_gem {
            GemStage::Gem(gem_cfg)
        } else {
            GemStage::Sub(PointBlock::new(concat_w, cfg.gem2_output_width(), &mut rng))
        };

        let head_in = cfg.head_input_width();
        let mut blocks = Vec::with_capacity(cfg.head_widths.len());
        let mut cin = head_in;
        for &w in &cfg.head_widths {
            blocks.push(PointBlock::new(cin, w, &mut rng));
            cin = w;
        }
        let out = Linear::new(cin, cfg.num_classes, FINAL_LAYER_STD, &mut rng);
        let head = match cfg.task {
            Task::Classification => Head::Cls { blocks, out },
            Task::PartSeg | Task::SceneSeg => Head::Seg { blocks, out },
        };

        Ok(PyramNet {
            cfg,
            stem,
            gem1,
            top,
            pan,
            gem2,
            head,
        })
    }

    /// Runs the network on a [B, N, F] batch and returns every traced stage,
    /// logits included.
    pub fn forward(
        &self,
        points: &Tensor<T>,
        training: bool,
        rng: &mut Rng64,
    ) -> Result<ForwardTrace<T>> {
        if points.rank() != 3 {
            return Err(Error::config(format!(
                "model input must be [B, N, F], got {:?}",
                points.shape()
            )));
        }
        let (b, n, f) = (points.shape()[0], points.shape()[1], points.shape()[2]);
        if n != self.cfg.n_points || f != self.cfg.in_channels {
            return Err(Error::Dim {
                op: "model_forward",
                lhs: vec![b, n, f],
                rhs: vec![b, self.cfg.n_points, self.cfg.in_channels],
            });
        }
        let cfg = &self.cfg;
        let splice = cfg.splice_width();
        let fused = cfg.pyramid.fused_channels();

        let mut trace = ForwardTrace::new();
        trace.push("input", vec![b, n, f], Some(points.clone()));

        let flat = ops::reshape(points, vec![b * n, f])?;
        let x = self.stem.forward(&flat, training)?;
        trace.push("post-mlp1", vec![b, n, 1, cfg.stem_width], Some(x.clone()));

        let g1 = self.gem_stage(&self.gem1, &x, b, n, training)?;
        match &self.gem1 {
            GemStage::Gem(_) => {
                trace.push("post-gem1", vec![b, n, 1, splice], Some(g1.clone()))
            }
            GemStage::Sub(_) => trace.push("gem1-sub", vec![b, n, 1, splice], Some(g1.clone())),
        }
        trace.push("splice", vec![b, n, splice], Some(g1.clone()));

        let mut t = g1.clone();
        let mut inters: Vec<Tensor<T>> = Vec::with_capacity(self.top.len());
        for blk in &self.top {
            t = blk.forward(&t, training)?;
            inters.push(t.clone());
        }
        let top_w = *cfg.mlp_widths.last().expect("validated non-empty");
        trace.push("mlp-top", vec![b, n, 1, top_w], Some(t.clone()));

        let pooled = match &self.pan {
            PanStage::Pan(pan) => {
                trace.push("pan-out", vec![b, n, splice, fused], None);
                let mut parts = Vec::with_capacity(b);
                for bi in 0..b {
                    let grid = ops::slice_rows(&g1, bi * n, n)?;
                    let branch_out = pan.forward(&grid, training)?;
                    let collapsed = pan_collapse(&branch_out)?;
                    parts.push(ops::reshape(&collapsed, vec![n, fused])?);
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                let cat = ops::concat_rows(&refs)?;
                trace.push("pan-gap", vec![b, n, 1, fused], Some(cat.clone()));
                cat
            }
            PanStage::Sub(blk) => {
                let s = blk.forward(&g1, training)?;
                trace.push("pan-sub", vec![b, n, 1, fused], Some(s.clone()));
                s
            }
        };

        let cat = ops::concat_last(&[&t, &pooled])?;
        trace.push("concat", vec![b, n, 1, cfg.concat_width()], Some(cat.clone()));

        let g2 = self.gem_stage(&self.gem2, &cat, b, n, training)?;
        let g2_w = cfg.gem2_output_width();
        match &self.gem2 {
            GemStage::Gem(_) => trace.push("post-gem2", vec![b, n, 1, g2_w], Some(g2.clone())),
            GemStage::Sub(_) => trace.push("gem2-sub", vec![b, n, 1, g2_w], Some(g2.clone())),
        }

        match &self.head {
            Head::Cls { blocks, out } => {
                let mut head_parts: Vec<&Tensor<T>> = vec![&g2];
                for &i in &cfg.cls_shortcuts {
                    head_parts.push(&inters[i]);
                }
                let head_in = ops::concat_last(&head_parts)?;
                let hw = cfg.head_input_width();
                trace.push("head-in", vec![b, n, hw], Some(head_in.clone()));

                let grid = ops::reshape(&head_in, vec![b, n, hw])?;
                let pooled = ops::max_pool_over_points(&grid)?;
                let mut h = ops::reshape(&pooled, vec![b, hw])?;
                for blk in blocks {
                    h = blk.forward(&h, training)?;
                }
                let h = ops::dropout(&h, cfg.dropout_keep, training, rng)?;
                let logits = out.forward(&h)?;
                trace.push("logits", vec![b, cfg.num_classes], Some(logits));
            }
            Head::Seg { blocks, out } => {
                let mut head_parts: Vec<&Tensor<T>> = vec![&g2];
                for &i in &cfg.seg_shortcuts {
                    head_parts.push(&inters[i]);
                }
                let head_in = ops::concat_last(&head_parts)?;
                let hw = cfg.head_input_width();
                trace.push("head-in", vec![b, n, hw], Some(head_in.clone()));

                let mut h = head_in;
                for blk in blocks {
                    h = blk.forward(&h, training)?;
                }
                let flat_logits = out.forward(&h)?;
                let logits = ops::reshape(&flat_logits, vec![b, n, cfg.num_classes])?;
                trace.push("logits", vec![b, n, cfg.num_classes], Some(logits));
            }
        }
        Ok(trace)
    }

    fn gem_stage(
        &self,
        stage: &GemStage<T>,
        x: &Tensor<T>,
        b: usize,
        n: usize,
        training: bool,
    ) -> Result<Tensor<T>> {
        match stage {
            GemStage::Gem(gcfg) => {
                // Covariance is always within one sample, never across the batch.
                if b == 1 {
                    gem_forward(x, gcfg)
                } else {
                    let mut parts = Vec::with_capacity(b);
                    for bi in 0..b {
                        parts.push(gem_forward(&ops::slice_rows(x, bi * n, n)?, gcfg)?);
                    }
                    let refs: Vec<&Tensor<T>> = parts.iter().collect();
                    ops::concat_rows(&refs)
                }
            }
            GemStage::Sub(blk) => blk.forward(x, training),
        }
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let block = |prefix: &str, blk: &PointBlock<T>, out: &mut Vec<(String, Tensor<T>)>| {
            out.push((format!("{}.w", prefix), blk.lin.w.clone()));
            out.push((format!("{}.b", prefix), blk.lin.b.clone()));
            out.push((format!("{}.bn.gamma", prefix), blk.bn.gamma.clone()));
            out.push((format!("{}.bn.beta", prefix), blk.bn.beta.clone()));
        };
        block("stem", &self.stem, &mut out);
        if let GemStage::Sub(blk) = &self.gem1 {
            block("gem1.sub", blk, &mut out);
        }
        for (i, blk) in self.top.iter().enumerate() {
            block(&format!("top.{}", i), blk, &mut out);
        }
        match &self.pan {
            PanStage::Pan(pan) => {
                for (i, br) in pan.branches.iter().enumerate() {
                    out.push((format!("pan.{}.kernel", i), br.kernel.clone()));
                    out.push((format!("pan.{}.bn.gamma", i), br.bn.gamma.clone()));
                    out.push((format!("pan.{}.bn.beta", i), br.bn.beta.clone()));
                }
            }
            PanStage::Sub(blk) => block("pan.sub", blk, &mut out),
        }
        if let GemStage::Sub(blk) = &self.gem2 {
            block("gem2.sub", blk, &mut out);
        }
        let (blocks, last) = match &self.head {
            Head::Cls { blocks, out } | Head::Seg { blocks, out } => (blocks, out),
        };
        for (i, blk) in blocks.iter().enumerate() {
            block(&format!("head.{}", i), blk, &mut out);
        }
        out.push(("head.out.w".to_string(), last.w.clone()));
        out.push(("head.out.b".to_string(), last.b.clone()));
        out
    }

    /// Batch-norm running buffers with stable names.
    pub fn buffers(&self) -> Vec<(String, Rc<RefCell<Vec<T>>>)> {
        let mut out = Vec::new();
        self.for_each_bn(|name, bn| {
            out.push((format!("{}.running_mean", name), Rc::clone(&bn.running_mean)));
            out.push((format!("{}.running_var", name), Rc::clone(&bn.running_var)));
        });
        out
    }

    fn for_each_bn(&self, mut f: impl FnMut(String, &BatchNorm<T>)) {
        f("stem.bn".to_string(), &self.stem.bn);
        if let GemStage::Sub(blk) = &self.gem1 {
            f("gem1.sub.bn".to_string(), &blk.bn);
        }
        for (i, blk) in self.top.iter().enumerate() {
            f(format!("top.{}.bn", i), &blk.bn);
        }
        match &self.pan {
            PanStage::Pan(pan) => {
                for (i, br) in pan.branches.iter().enumerate() {
                    f(format!("pan.{}.bn", i), &br.bn);
                }
            }
            PanStage::Sub(blk) => f("pan.sub.bn".to_string(), &blk.bn),
        }
        if let GemStage::Sub(blk) = &self.gem2 {
            f("gem2.sub.bn".to_string(), &blk.bn);
        }
        let blocks = match &self.head {
            Head::Cls { blocks, .. } | Head::Seg { blocks, .. } => blocks,
        };
        for (i, blk) in blocks.iter().enumerate() {
            f(format!("head.{}.bn", i), &blk.bn);
        }
    }

    pub fn set_bn_decay(&self, decay: f64) {
        self.for_each_bn(|_, bn| bn.set_decay(decay));
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }
}

/// Mean cross-entropy over samples (classification) or over all points
/// (segmentation).
pub fn loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], task: Task) -> Result<Tensor<T>> {
    match task {
        Task::Classification => ops::softmax_cross_entropy(logits, labels),
        Task::PartSeg | Task::SceneSeg => {
            if logits.rank() != 3 {
                return Err(Error::config(format!(
                    "segmentation logits must be [B, N, P], got {:?}",
                    logits.shape()
                )));
            }
            let (b, n, p) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
            let flat = ops::reshape(logits, vec![b * n, p])?;
            ops::softmax_cross_entropy(&flat, labels)
        }
    }
}

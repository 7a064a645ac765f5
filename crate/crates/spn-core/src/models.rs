//! The three nodule classifiers.
//!
//! All take a 32x32x1 image and emit two-class probabilities. They differ in
//! topology: a single conv/pool spine (DSPN), a dual-path net whose paths
//! split local from global context (DDSPN), and a three-path valid-padded
//! net whose paths reconvene at 4x4 (TDSPN).
//!
//! Each architecture has one canonical normalization scheme and a small set
//! of studied alternatives; `ModelOptions::validate` rejects combinations
//! outside that set.

use crate::error::{Error, Result};
use crate::nn::{ActivationKind, GraphSpec, LayerSpec, Padding};

pub const INPUT_EXTENT: usize = 32;
pub const NUM_CLASSES: usize = 2;
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchName {
    Dspn,
    Ddspn,
    Tdspn,
}

impl ArchName {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Dspn => "dspn",
            ArchName::Ddspn => "ddspn",
            ArchName::Tdspn => "tdspn",
        }
    }

    pub fn parse(s: &str) -> Option<ArchName> {
        match s {
            "dspn" => Some(ArchName::Dspn),
            "ddspn" => Some(ArchName::Ddspn),
            "tdspn" => Some(ArchName::Tdspn),
            _ => None,
        }
    }

    pub const ALL: [ArchName; 3] = [ArchName::Dspn, ArchName::Ddspn, ArchName::Tdspn];
}

/// How the network fights overfitting between feature extraction and the
/// classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// One 50% dropout inside the dense head (DSPN's canonical scheme).
    Dropout,
    /// Batch normalization after convolutions and hidden dense layers
    /// (DDSPN's canonical scheme).
    BatchNorm,
    /// No dropout or batch norm; global pooling collapses the feature maps
    /// straight into the output layer (TDSPN's canonical scheme).
    GlobalPoolOnly,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Dropout => "dropout",
            Normalization::BatchNorm => "batchnorm",
            Normalization::GlobalPoolOnly => "globalpool",
        }
    }

    pub fn parse(s: &str) -> Option<Normalization> {
        match s {
            "dropout" => Some(Normalization::Dropout),
            "batchnorm" => Some(Normalization::BatchNorm),
            "globalpool" => Some(Normalization::GlobalPoolOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPooling {
    Max,
    Avg,
}

impl HeadPooling {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadPooling::Max => "max",
            HeadPooling::Avg => "avg",
        }
    }

    pub fn parse(s: &str) -> Option<HeadPooling> {
        match s {
            "max" => Some(HeadPooling::Max),
            "avg" => Some(HeadPooling::Avg),
            _ => None,
        }
    }

    fn layer(self) -> LayerSpec {
        match self {
            HeadPooling::Max => LayerSpec::GlobalMaxPool,
            HeadPooling::Avg => LayerSpec::GlobalAvgPool,
        }
    }
}

/// Build-time knobs. Optimizer and regularizer are training-time choices and
/// live in the experiment config instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    pub activation: ActivationKind,
    pub normalization: Normalization,
    /// Consulted wherever the graph contains a global pooling head: always
    /// for TDSPN, and for the other two only under `GlobalPoolOnly`.
    pub head_pooling: HeadPooling,
}

impl ModelOptions {
    /// Each architecture's published configuration.
    pub fn canonical(arch: ArchName) -> ModelOptions {
        ModelOptions {
            activation: ActivationKind::Relu,
            normalization: match arch {
                ArchName::Dspn => Normalization::Dropout,
                ArchName::Ddspn => Normalization::BatchNorm,
                ArchName::Tdspn => Normalization::GlobalPoolOnly,
            },
            head_pooling: HeadPooling::Max,
        }
    }

    /// Restricts options to the studied combinations: TDSPN was never run
    /// with dropout.
    pub fn validate(&self, arch: ArchName) -> Result<()> {
        if arch == ArchName::Tdspn && self.normalization == Normalization::Dropout {
            return Err(Error::invalid(
                "model options",
                "tdspn has no dropout variant",
            ));
        }
        Ok(())
    }
}

/// Builds the named architecture with the given options.
pub fn build_model(arch: ArchName, options: &ModelOptions) -> Result<GraphSpec> {
    options.validate(arch)?;
    Ok(match arch {
        ArchName::Dspn => build_dspn(options),
        ArchName::Ddspn => build_ddspn(options),
        ArchName::Tdspn => build_tdspn(options),
    })
}

fn conv_same(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel,
        padding: Padding::Same,
        stride: 1,
    }
}

fn conv_valid(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel,
        padding: Padding::Valid,
        stride: 1,
    }
}

fn pool(window: usize, stride: usize) -> LayerSpec {
    LayerSpec::MaxPool2d { window, stride }
}

fn act(options: &ModelOptions) -> LayerSpec {
    LayerSpec::Activation {
        kind: options.activation,
    }
}

/// Single-spine net: three same-padded 3x3 conv/pool sets (32, 64, 128
/// filters; sizes 32 -> 16 -> 8 -> 4), a 1x1 conv at 128 filters, then a
/// 256/128 dense head with one 50% dropout (canonical), batch norm in the
/// dropout slot, or a global-pool head, per options.
pub fn build_dspn(options: &ModelOptions) -> GraphSpec {
    let mut g = GraphSpec::new((INPUT_EXTENT, INPUT_EXTENT, 1));
    g.add("conv1", conv_same(32, 3), &["input"])
        .add("act1", act(options), &["conv1"])
        .add("pool1", pool(2, 2), &["act1"])
        .add("conv2", conv_same(64, 3), &["pool1"])
        .add("act2", act(options), &["conv2"])
        .add("pool2", pool(2, 2), &["act2"])
        .add("conv3", conv_same(128, 3), &["pool2"])
        .add("act3", act(options), &["conv3"])
        .add("pool3", pool(2, 2), &["act3"])
        .add("conv4", conv_same(128, 1), &["pool3"])
        .add("act4", act(options), &["conv4"]);
    match options.normalization {
        Normalization::GlobalPoolOnly => {
            g.add("gpool", options.head_pooling.layer(), &["act4"])
                .add("logits", LayerSpec::Dense { units: NUM_CLASSES }, &["gpool"]);
        }
        norm => {
            g.add("flatten", LayerSpec::Flatten, &["act4"])
                .add("fc1", LayerSpec::Dense { units: 256 }, &["flatten"])
                .add("fc1_act", act(options), &["fc1"]);
            let head_in = match norm {
                Normalization::Dropout => {
                    g.add("drop1", LayerSpec::Dropout { rate: DROPOUT_RATE }, &["fc1_act"]);
                    "drop1"
                }
                Normalization::BatchNorm => {
                    g.add("fc1_bn", LayerSpec::batch_norm_default(), &["fc1_act"]);
                    "fc1_bn"
                }
                Normalization::GlobalPoolOnly => unreachable!("handled above"),
            };
            g.add("fc2", LayerSpec::Dense { units: 128 }, &[head_in])
                .add("fc2_act", act(options), &["fc2"])
                .add("logits", LayerSpec::Dense { units: NUM_CLASSES }, &["fc2_act"]);
        }
    }
    g.add("softmax", LayerSpec::SoftmaxOutput, &["logits"]);
    g
}

/// Dual-path net. Path A keeps resolution and few filters (local detail),
/// path B steps quickly to 128 filters (global context); both end at 8x8 and
/// concatenate to 8x8x160 before a 512/256 dense head. Canonically batch
/// normalization sits after every conv and hidden dense layer; the dropout
/// variant strips batch norm and puts one 50% dropout between the hidden
/// dense layers; the global-pool variant strips the dense head entirely.
pub fn build_ddspn(options: &ModelOptions) -> GraphSpec {
    let bn = options.normalization == Normalization::BatchNorm;
    let mut g = GraphSpec::new((INPUT_EXTENT, INPUT_EXTENT, 1));
    let conv_block = |g: &mut GraphSpec, name: &str, layer: LayerSpec, input: &str| {
        g.add(name, layer, &[input]);
        let mut prev = name.to_string();
        if bn {
            let bn_name = format!("{name}_bn");
            g.add(&bn_name, LayerSpec::batch_norm_default(), &[&prev]);
            prev = bn_name;
        }
        let act_name = format!("{name}_act");
        g.add(&act_name, act(options), &[&prev]);
        act_name
    };
    let a1 = conv_block(&mut g, "a_conv1", conv_same(32, 3), "input");
    g.add("a_pool1", pool(2, 2), &[&a1]);
    let a2 = conv_block(&mut g, "a_conv2", conv_same(32, 1), "a_pool1");
    g.add("a_pool2", pool(2, 2), &[&a2]);
    let b1 = conv_block(&mut g, "b_conv1", conv_same(64, 3), "input");
    g.add("b_pool1", pool(2, 2), &[&b1]);
    let b2 = conv_block(&mut g, "b_conv2", conv_same(128, 3), "b_pool1");
    g.add("b_pool2", pool(2, 2), &[&b2]);
    g.add("concat", LayerSpec::Concat, &["a_pool2", "b_pool2"]);
    match options.normalization {
        Normalization::GlobalPoolOnly => {
            g.add("gpool", options.head_pooling.layer(), &["concat"])
                .add("logits", LayerSpec::Dense { units: NUM_CLASSES }, &["gpool"]);
        }
        norm => {
            g.add("flatten", LayerSpec::Flatten, &["concat"])
                .add("fc1", LayerSpec::Dense { units: 512 }, &["flatten"]);
            let mut prev = "fc1".to_string();
            if bn {
                g.add("fc1_bn", LayerSpec::batch_norm_default(), &["fc1"]);
                prev = "fc1_bn".to_string();
            }
            g.add("fc1_act", act(options), &[&prev]);
            prev = "fc1_act".to_string();
            if norm == Normalization::Dropout {
                g.add("drop1", LayerSpec::Dropout { rate: DROPOUT_RATE }, &["fc1_act"]);
                prev = "drop1".to_string();
            }
            g.add("fc2", LayerSpec::Dense { units: 256 }, &[&prev]);
            prev = "fc2".to_string();
            if bn {
                g.add("fc2_bn", LayerSpec::batch_norm_default(), &["fc2"]);
                prev = "fc2_bn".to_string();
            }
            g.add("fc2_act", act(options), &[&prev])
                .add("logits", LayerSpec::Dense { units: NUM_CLASSES }, &["fc2_act"]);
        }
    }
    g.add("softmax", LayerSpec::SoftmaxOutput, &["logits"]);
    g
}

/// Three-path net, valid padding throughout, every path ending at 4x4.
///
/// Path 1 climbs slowly through strictly-3x3 convs (32, 64, 128) with two
/// pools between them. Path 2 jumps to 256 filters: a 5x5 conv and 2x2 pool
/// put it at 14x14 before the 256-filter conv, and a 3x3/3 pool lands it at
/// 4x4. Path 3 is shallow: a 5x5/5 pool to 6x6 and one 512-filter conv.
/// The 4x4x896 concat feeds global pooling straight into the output layer;
/// there are no hidden dense layers. Path 1's last conv and path 3's conv
/// feed the concat linearly (no trailing activation). The batch-norm
/// variant adds one batch norm after each conv and keeps the pooled head.
pub fn build_tdspn(options: &ModelOptions) -> GraphSpec {
    let bn = options.normalization == Normalization::BatchNorm;
    let mut g = GraphSpec::new((INPUT_EXTENT, INPUT_EXTENT, 1));
    // Adds conv [+ bn] and returns the node the next layer should read.
    let conv = |g: &mut GraphSpec, name: &str, layer: LayerSpec, input: &str| -> String {
        g.add(name, layer, &[input]);
        if bn {
            let bn_name = format!("{name}_bn");
            g.add(&bn_name, LayerSpec::batch_norm_default(), &[name]);
            bn_name
        } else {
            name.to_string()
        }
    };
    let p1c1 = conv(&mut g, "p1_conv1", conv_valid(32, 3), "input");
    g.add("p1_act1", act(options), &[&p1c1])
        .add("p1_pool1", pool(2, 2), &["p1_act1"]);
    let p1c2 = conv(&mut g, "p1_conv2", conv_valid(64, 3), "p1_pool1");
    g.add("p1_act2", act(options), &[&p1c2])
        .add("p1_pool2", pool(2, 2), &["p1_act2"]);
    let p1_out = conv(&mut g, "p1_conv3", conv_valid(128, 3), "p1_pool2");
    let p2c1 = conv(&mut g, "p2_conv1", conv_valid(64, 5), "input");
    g.add("p2_act1", act(options), &[&p2c1])
        .add("p2_pool1", pool(2, 2), &["p2_act1"]);
    let p2c2 = conv(&mut g, "p2_conv2", conv_valid(256, 3), "p2_pool1");
    g.add("p2_act2", act(options), &[&p2c2])
        .add("p2_pool2", pool(3, 3), &["p2_act2"]);
    g.add("p3_pool1", pool(5, 5), &["input"]);
    let p3_out = conv(&mut g, "p3_conv1", conv_valid(512, 3), "p3_pool1");
    g.add("concat", LayerSpec::Concat, &[&p1_out, "p2_pool2", &p3_out])
        .add("gpool", options.head_pooling.layer(), &["concat"])
        .add("logits", LayerSpec::Dense { units: NUM_CLASSES }, &["gpool"])
        .add("softmax", LayerSpec::SoftmaxOutput, &["logits"]);
    g
}

/// (trainable, non_trainable) element counts. Non-trainable means batch
/// norm running statistics.
pub fn count_parameters(graph: &GraphSpec) -> Result<(usize, usize)> {
    let compiled = graph.compile()?;
    let mut trainable = 0;
    let mut frozen = 0;
    for (_, role, shape) in compiled.parameter_shapes() {
        let n: usize = shape.iter().product();
        if role.is_trainable() {
            trainable += n;
        } else {
            frozen += n;
        }
    }
    Ok((trainable, frozen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;

    fn canonical(arch: ArchName) -> GraphSpec {
        build_model(arch, &ModelOptions::canonical(arch)).unwrap()
    }

    /// Independent spreadsheet-style summation of the canonical layer
    /// tables. Conv cost is k*k*c_in*f + f, dense is in*out + out, batch
    /// norm is 2c trainable + 2c frozen.
    #[test]
    fn parameter_counts_match_hand_summation() {
        // conv1 3*3*1*32+32, conv2 3*3*32*64+64, conv3 3*3*64*128+128,
        // conv4 1*1*128*128+128, fc1 2048*256+256, fc2 256*128+128,
        // logits 128*2+2.
        let dspn_expected =
            320 + 18_496 + 73_856 + 16_512 + 524_544 + 32_896 + 258;
        assert_eq!(dspn_expected, 666_882);
        assert_eq!(
            count_parameters(&canonical(ArchName::Dspn)).unwrap(),
            (666_882, 0)
        );

        // Path A: 3*3*1*32+32, bn 64, 1*1*32*32+32, bn 64.
        // Path B: 3*3*1*64+64, bn 128, 3*3*64*128+128, bn 256.
        // Head: 10240*512+512, bn 1024, 512*256+256, bn 512, 256*2+2.
        let ddspn_expected = (320 + 64 + 1_056 + 64)
            + (640 + 128 + 73_856 + 256)
            + (5_243_392 + 1_024 + 131_328 + 512 + 514);
        assert_eq!(ddspn_expected, 5_453_154);
        // Frozen: running mean/var mirror gamma/beta element-for-element.
        let ddspn_frozen = 64 + 64 + 128 + 256 + 1_024 + 512;
        assert_eq!(ddspn_frozen, 2_048);
        assert_eq!(
            count_parameters(&canonical(ArchName::Ddspn)).unwrap(),
            (5_453_154, 2_048)
        );

        // Path 1: 3*3*1*32+32, 3*3*32*64+64, 3*3*64*128+128.
        // Path 2: 5*5*1*64+64, 3*3*64*256+256. Path 3: 3*3*1*512+512.
        // Head: 896*2+2.
        let tdspn_expected =
            (320 + 18_496 + 73_856) + (1_664 + 147_712) + 5_120 + 1_794;
        assert_eq!(tdspn_expected, 248_962);
        assert_eq!(
            count_parameters(&canonical(ArchName::Tdspn)).unwrap(),
            (248_962, 0)
        );
    }

    #[test]
    fn dspn_pool_schedule_is_16_8_4() {
        let g = canonical(ArchName::Dspn).compile().unwrap();
        // The pooling trace halves 32 down to 4: pool outputs are 16, 8, 4,
        // each exactly once.
        let mut pool_sizes = Vec::new();
        for idx in 0..g.node_count() {
            if matches!(g.layer(idx), LayerSpec::MaxPool2d { .. }) {
                match g.shape_of(g.node_id(idx)).unwrap() {
                    Shape::Spatial { h, w, .. } => {
                        assert_eq!(h, w);
                        pool_sizes.push(h);
                    }
                    Shape::Flat { .. } => panic!("pool output must be spatial"),
                }
            }
        }
        assert_eq!(pool_sizes, vec![16, 8, 4]);
        assert_eq!(
            g.shape_of("pool3"),
            Some(Shape::Spatial { h: 4, w: 4, c: 128 })
        );
    }

    #[test]
    fn ddspn_paths_agree_at_concat() {
        let g = canonical(ArchName::Ddspn).compile().unwrap();
        assert_eq!(g.shape_of("a_pool2"), Some(Shape::Spatial { h: 8, w: 8, c: 32 }));
        assert_eq!(g.shape_of("b_pool2"), Some(Shape::Spatial { h: 8, w: 8, c: 128 }));
        assert_eq!(g.shape_of("concat"), Some(Shape::Spatial { h: 8, w: 8, c: 160 }));
    }

    #[test]
    fn tdspn_quoted_dimensions_hold() {
        let g = canonical(ArchName::Tdspn).compile().unwrap();
        // 14x14 going into the 256-filter conv.
        assert_eq!(g.shape_of("p2_pool1"), Some(Shape::Spatial { h: 14, w: 14, c: 64 }));
        // 6x6 after path 3's 5x5/5 pool.
        assert_eq!(g.shape_of("p3_pool1"), Some(Shape::Spatial { h: 6, w: 6, c: 1 }));
        assert_eq!(g.shape_of("concat"), Some(Shape::Spatial { h: 4, w: 4, c: 896 }));
        assert_eq!(g.shape_of("gpool"), Some(Shape::Flat { len: 896 }));
    }

    #[test]
    fn normalization_inventory_per_architecture() {
        let count = |g: &GraphSpec, pred: fn(&LayerSpec) -> bool| {
            let c = g.compile().unwrap();
            (0..c.node_count()).filter(|&i| pred(c.layer(i))).count()
        };
        let is_dropout = |l: &LayerSpec| matches!(l, LayerSpec::Dropout { .. });
        let is_bn = |l: &LayerSpec| matches!(l, LayerSpec::BatchNorm { .. });

        let dspn = canonical(ArchName::Dspn);
        assert_eq!(count(&dspn, is_dropout), 1);
        assert_eq!(count(&dspn, is_bn), 0);

        let ddspn = canonical(ArchName::Ddspn);
        assert_eq!(count(&ddspn, is_dropout), 0);
        assert_eq!(count(&ddspn, is_bn), 6);

        let tdspn = canonical(ArchName::Tdspn);
        assert_eq!(count(&tdspn, is_dropout), 0);
        assert_eq!(count(&tdspn, is_bn), 0);

        // TDSPN's batch-norm variant: one per conv.
        let bn_opts = ModelOptions {
            normalization: Normalization::BatchNorm,
            ..ModelOptions::canonical(ArchName::Tdspn)
        };
        let tdspn_bn = build_model(ArchName::Tdspn, &bn_opts).unwrap();
        assert_eq!(count(&tdspn_bn, is_bn), 6);

        // TDSPN's final-path convs feed the concat with no activation.
        let c = tdspn.compile().unwrap();
        let concat = c.index_of("concat").unwrap();
        assert!(matches!(c.layer(concat), LayerSpec::Concat));
    }

    #[test]
    fn variant_lattice_is_enforced() {
        let mut opts = ModelOptions::canonical(ArchName::Tdspn);
        opts.normalization = Normalization::Dropout;
        assert!(build_model(ArchName::Tdspn, &opts).is_err());

        // Every studied combination compiles.
        for arch in ArchName::ALL {
            for norm in [
                Normalization::Dropout,
                Normalization::BatchNorm,
                Normalization::GlobalPoolOnly,
            ] {
                if arch == ArchName::Tdspn && norm == Normalization::Dropout {
                    continue;
                }
                for headp in [HeadPooling::Max, HeadPooling::Avg] {
                    for activation in [
                        ActivationKind::Relu,
                        ActivationKind::leaky_relu_default(),
                        ActivationKind::elu_default(),
                    ] {
                        let opts = ModelOptions {
                            activation,
                            normalization: norm,
                            head_pooling: headp,
                        };
                        let g = build_model(arch, &opts).unwrap();
                        let compiled = g.compile().unwrap_or_else(|e| {
                            panic!("{arch:?}/{norm:?}/{headp:?}: {e}")
                        });
                        let last = compiled.node_id(compiled.node_count() - 1);
                        assert_eq!(compiled.shape_of(last), Some(Shape::Flat { len: 2 }));
                    }
                }
            }
        }
    }

    #[test]
    fn global_pool_variants_collapse_the_head() {
        for arch in [ArchName::Dspn, ArchName::Ddspn] {
            let opts = ModelOptions {
                normalization: Normalization::GlobalPoolOnly,
                head_pooling: HeadPooling::Avg,
                ..ModelOptions::canonical(arch)
            };
            let g = build_model(arch, &opts).unwrap().compile().unwrap();
            assert!(g.index_of("fc1").is_none());
            assert!(g.index_of("gpool").is_some());
        }
        // Max and avg pooled variants have identical parameter inventories.
        let max_opts = ModelOptions::canonical(ArchName::Tdspn);
        let avg_opts = ModelOptions {
            head_pooling: HeadPooling::Avg,
            ..max_opts
        };
        assert_eq!(
            count_parameters(&build_tdspn(&max_opts)).unwrap(),
            count_parameters(&build_tdspn(&avg_opts)).unwrap()
        );
    }

    #[test]
    fn non_trainable_params_come_only_from_batch_norm() {
        for arch in ArchName::ALL {
            let opts = ModelOptions {
                normalization: Normalization::BatchNorm,
                ..ModelOptions::canonical(arch)
            };
            let (_, frozen) = count_parameters(&build_model(arch, &opts).unwrap()).unwrap();
            assert!(frozen > 0, "{arch:?} batch-norm variant");
            let plain_opts = ModelOptions {
                normalization: Normalization::GlobalPoolOnly,
                ..ModelOptions::canonical(arch)
            };
            let (_, frozen) =
                count_parameters(&build_model(arch, &plain_opts).unwrap()).unwrap();
            assert_eq!(frozen, 0, "{arch:?} without batch norm");
        }
    }
}

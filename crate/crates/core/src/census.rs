//! Parameter census of a trained model and the reference count of a small
//! convolutional baseline with comparable capacity.
//!
//! Counting convention for our model: every stored Saab coefficient (DC
//! anchor and kept AC filters, one bias per bank) plus, for every tree,
//! two parameters per split (feature index, threshold) and one per leaf,
//! plus the base scores.
//!
//! The reference network is a 3D U-Net over `H x W x T` volumes with two
//! input channels, four resolution levels of widths 16, 32, 64, 128, two
//! `3x3x3` convolutions per level on both paths, `2x2x1` transposed
//! convolutions for upsampling, a `1x1x1` segmentation head and a linear
//! three-class head on the globally pooled bottleneck. Biases are counted;
//! normalization layers are omitted. It is never built or trained; only its
//! size is computed.

use serde::Serialize;

use crate::io::container::ModelContainer;

/// Widths of the reference network's four levels.
pub const REFERENCE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const REFERENCE_INPUT_CHANNELS: usize = 2;
pub const REFERENCE_CLASSES: usize = 3;

fn conv(kernel: usize, cin: usize, cout: usize) -> usize {
    kernel * cin * cout + cout
}

/// Parameters of the reference 3D U-Net, layer by layer.
pub fn reference_cnn_layers() -> Vec<(String, usize)> {
    let w = REFERENCE_WIDTHS;
    let mut layers = Vec::new();
    let mut cin = REFERENCE_INPUT_CHANNELS;
    for (i, &c) in w.iter().enumerate() {
        layers.push((format!("down{}_conv1", i + 1), conv(27, cin, c)));
        layers.push((format!("down{}_conv2", i + 1), conv(27, c, c)));
        cin = c;
    }
    for i in (0..w.len() - 1).rev() {
        let (deep, c) = (w[i + 1], w[i]);
        layers.push((format!("up{}_transpose", i + 1), conv(4, deep, c)));
        layers.push((format!("up{}_conv1", i + 1), conv(27, 2 * c, c)));
        layers.push((format!("up{}_conv2", i + 1), conv(27, c, c)));
    }
    layers.push(("seg_head".into(), conv(1, w[0], 1)));
    layers.push(("cls_head".into(), conv(1, w[w.len() - 1], REFERENCE_CLASSES)));
    layers
}

pub fn reference_cnn_parameters() -> usize {
    reference_cnn_layers().iter().map(|(_, n)| n).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Census {
    pub encoder: usize,
    pub seg: usize,
    pub cls: usize,
    pub total: usize,
    pub reference_cnn: usize,
}

impl Census {
    pub fn of(model: &ModelContainer) -> Self {
        let encoder = model.encoder.parameter_count();
        let seg = model.seg.as_ref().map_or(0, |s| s.parameter_count());
        let cls = model.cls.as_ref().map_or(0, |c| c.parameter_count());
        Census {
            encoder,
            seg,
            cls,
            total: encoder + seg + cls,
            reference_cnn: reference_cnn_parameters(),
        }
    }

    /// Reference count divided by ours.
    pub fn reduction(&self) -> f64 {
        self.reference_cnn as f64 / self.total.max(1) as f64
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        [
            ("encoder", self.encoder),
            ("seg", self.seg),
            ("cls", self.cls),
            ("total", self.total),
            ("reference_cnn", self.reference_cnn),
        ]
        .iter()
        .map(|(k, v)| vec![k.to_string(), v.to_string()])
        .collect()
    }
}

use super::config::{ModelConfig, SaimMode};
use crate::data::{Sample, SemanticMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model-ready tensors for one sample.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    /// `o × 4` normalized boxes.
    pub location: Tensor,
    /// `o × 4` scaled box velocities.
    pub velocity: Tensor,
    pub cells: Vec<usize>,
    /// `o × 3` scaled ego-motion over observation.
    pub ego_obs: Tensor,
    /// `τ × 3` scaled ego-motion over prediction.
    pub ego_future: Tensor,
    /// `np × (ps·ps·4)` flattened patches, present when the scene module is on.
    pub patches: Option<Tensor>,
}

/// Flattens a map into row-major patches, each laid out channel, row, column.
pub fn patchify(map: &SemanticMap, patch_size: usize) -> Result<Tensor> {
    let ps = patch_size;
    if ps == 0 || map.height % ps != 0 || map.width % ps != 0 {
        return Err(Error::Contract(format!(
            "map {}x{} cannot be split into {ps}x{ps} patches",
            map.height, map.width
        )));
    }
    let (pr, pc) = (map.height / ps, map.width / ps);
    let mut data = Vec::with_capacity(map.height * map.width * 4);
    for py in 0..pr {
        for px in 0..pc {
            for ch in 0..4 {
                for y in 0..ps {
                    for x in 0..ps {
                        data.push(map.get(ch, py * ps + y, px * ps + x) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(vec![pr * pc, ps * ps * 4], data)
}

impl SampleInputs {
    pub fn new(sample: &Sample, map: Option<&SemanticMap>, config: &ModelConfig) -> Result<Self> {
        let (o, tau) = (config.obs_len, config.pred_len);
        if sample.obs_len() != o || sample.pred_len() != tau {
            return Err(Error::Config(format!(
                "sample {} has {}+{} steps but the model expects {o}+{tau}",
                sample.ped_id,
                sample.obs_len(),
                sample.pred_len()
            )));
        }
        if let Some(&cell) = sample.obs_cells.iter().chain([&sample.final_cell]).find(|&&c| c >= config.num_cells) {
            return Err(Error::Config(format!(
                "sample {} uses grid cell {cell} but the model has {} cells",
                sample.ped_id, config.num_cells
            )));
        }
        let scale = &config.input_scale;
        let rows = |v: &[[f64; 4]], k: f64| Tensor::from_rows(&v.iter().map(|r| r.map(|x| x * k)).collect::<Vec<_>>());
        let ego_rows = |v: &[[f64; 3]]| {
            Tensor::from_rows(
                &v.iter()
                    .map(|e| [e[0] * scale.ego[0], e[1] * scale.ego[1], e[2] * scale.ego[2]])
                    .collect::<Vec<_>>(),
            )
        };
        let patches = if config.saim.mode == SaimMode::Off {
            None
        } else {
            let map = map.ok_or_else(|| {
                Error::Contract(format!("sample {} has no semantic map {}", sample.ped_id, sample.semantic_map_ref))
            })?;
            let [h, w] = config.saim.map_size;
            let resized;
            let map = if map.height == h && map.width == w {
                map
            } else {
                resized = map.resize_nearest(h, w);
                &resized
            };
            Some(patchify(map, config.saim.patch_size)?)
        };
        Ok(Self {
            location: rows(&sample.obs_boxes, 1.0)?,
            velocity: rows(&sample.obs_velocities, scale.velocity)?,
            cells: sample.obs_cells.clone(),
            ego_obs: ego_rows(&sample.ego[..o])?,
            ego_future: ego_rows(&sample.ego[o..])?,
            patches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_row_major() {
        let mut map = SemanticMap::empty(0, 4, 2);
        // mark pixel (y=1, x=3) in the vehicles channel: patch 1, offset channel 2, y 1, x 1
        let idx = 2 * 8 + 4 + 3;
        map.data[idx] = 1;
        let p = patchify(&map, 2).unwrap();
        assert_eq!(p.shape(), &[2, 16]);
        assert_eq!(p.row_slice(0).iter().sum::<f64>(), 0.0);
        assert_eq!(p.at(1, 2 * 4 + 2 + 1), 1.0);
        assert!(patchify(&map, 3).is_err());
    }

    #[test]
    fn full_size_map_has_576_patches() {
        let map = SemanticMap::empty(0, 384, 216);
        assert_eq!(patchify(&map, 12).unwrap().shape(), &[576, 576]);
    }
}

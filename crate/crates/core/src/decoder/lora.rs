use super::model::Decoder;
use crate::error::Result;
use crate::scalar::Scalar;

/// Folds every adapter into its base projection, `W += (scale / rank) * down * up`,
/// and returns a decoder without adapters.
pub fn lora_merge<T: Scalar>(decoder: Decoder<T>) -> Result<Decoder<T>> {
    let (mut config, mut params) = decoder.into_parts();
    if config.lora_rank == 0 {
        return Decoder::from_parts(config, params);
    }
    let s = T::of(config.lora_scale / config.lora_rank as f64);
    let layers = params.index().layers.clone();
    for layer in &layers {
        let Some(lora) = layer.lora else { continue };
        for (&base, pair) in layer.proj.iter().zip(lora) {
            let delta = params.tensor(pair.down).matmul(params.tensor(pair.up))?;
            params.tensor_mut(base).axpy(s, &delta);
        }
    }
    params.detach_adapters();
    config.lora_rank = 0;
    Decoder::from_parts(config, params)
}

//! Component-conditioned encoder passes shared by training and inference.

use protoprompt_autodiff::{Graph, Tensor, Var};

use crate::datagen::fill_template;
use crate::encoder::DualEncoder;
use crate::error::Result;
use crate::prompt::{ica_forward, tsa_forward, BlockMode, BoundComponent, DomainComponent};
use crate::prototype::DomainPrototypeSet;

/// Encoder with the prompt geometry the component was built for.
pub fn encoder_for(enc: &DualEncoder, component: &DomainComponent) -> Result<DualEncoder> {
    if enc.replace_depth() == component.meta.replace_depth && enc.prompt_len() == component.meta.prompt_len {
        return Ok(enc.clone());
    }
    enc.with_prompt_geometry(component.meta.replace_depth, component.meta.prompt_len)
}

/// Prototype matrix the component's attention blocks read.
pub fn prototype_input(component: &DomainComponent, prototypes: &DomainPrototypeSet) -> Tensor {
    prototypes.matrix(component.meta.prototype_kind, component.meta.granularity)
}

/// `C x e` text features: `template` filled with each category, the general
/// prompt at layer 1 and the matching self-attention row at the replacement
/// depth. With a single prototype row every category shares it.
pub fn text_features(
    g: &mut Graph,
    enc: &DualEncoder,
    bound: &BoundComponent,
    prototypes: Var,
    categories: &[String],
    template: &str,
    mode: BlockMode,
) -> Result<Var> {
    let prior = tsa_forward(g, prototypes, &bound.tsa, mode)?;
    let rows = g.value(prior).rows();
    let mut feats = Vec::with_capacity(categories.len());
    for (j, c) in categories.iter().enumerate() {
        let tokens = enc.tokenize(&fill_template(template, c)?);
        let r = if rows == 1 { 0 } else { j };
        let row = g.slice_rows(prior, r, r + 1);
        feats.push(enc.encode_text(g, &tokens, Some(bound.general_text), Some(row))?);
    }
    Ok(g.concat_rows(&feats))
}

/// `1 x e` image feature with the general prompts and the cross-attention
/// instance prompt.
pub fn image_feature(
    g: &mut Graph,
    enc: &DualEncoder,
    bound: &BoundComponent,
    prototypes: Var,
    image: &Tensor,
    mode: BlockMode,
) -> Result<Var> {
    let ica = bound.ica;
    let mut provider = |g: &mut Graph, cls: Var| ica_forward(g, cls, prototypes, &ica, mode);
    let out = enc.encode_image(g, image, Some(&bound.general_image), Some(&mut provider))?;
    Ok(out.feature)
}

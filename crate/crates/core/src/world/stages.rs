use super::{render_pose, render_rgb, PatchRect, SceneSpec};
use crate::raster::Raster;

/// The conditioning side of one iterative stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePrompt {
    /// 1-based stage index; also the number of people described so far.
    pub stage: usize,
    pub num_people: usize,
    pub global_tokens: Vec<u32>,
    /// `c_1 ⊕ … ⊕ c_stage`.
    pub text_tokens: Vec<u32>,
    pub desc_len: usize,
    /// Boxes of persons `1..=stage`, ascending by person index.
    pub boxes: Vec<(usize, PatchRect)>,
}

impl StagePrompt {
    /// Prompt for stage `stage` of a scene.
    pub fn for_stage(spec: &SceneSpec, stage: usize) -> Self {
        assert!((1..=spec.num_people).contains(&stage));
        let persons = &spec.persons[..stage];
        Self {
            stage,
            num_people: spec.num_people,
            global_tokens: spec.global_tokens.clone(),
            text_tokens: persons.iter().flat_map(|p| p.desc_tokens.iter().copied()).collect(),
            desc_len: spec.desc_len(),
            boxes: persons.iter().map(|p| (p.index, p.bbox)).collect(),
        }
    }

    pub fn is_final(&self) -> bool {
        self.stage == self.num_people
    }
}

/// One supervision stage of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSample {
    pub prompt: StagePrompt,
    /// `P_{i-1}`; all background at stage 1.
    pub context_pose: Raster,
    /// `P_i`.
    pub target_pose: Raster,
    /// Present only at the final stage.
    pub target_image: Option<Raster>,
}

impl StageSample {
    pub fn stage(&self) -> usize {
        self.prompt.stage
    }
}

/// Splits an `N`-person scene into `N` stages with cumulative pose targets.
pub fn decompose_stages(spec: &SceneSpec) -> Vec<StageSample> {
    let skeletons = spec.skeletons();
    let mut previous = render_pose(&[], spec.canvas);
    (1..=spec.num_people)
        .map(|i| {
            let target = render_pose(&skeletons[..i], spec.canvas);
            let sample = StageSample {
                prompt: StagePrompt::for_stage(spec, i),
                context_pose: previous.clone(),
                target_pose: target.clone(),
                target_image: (i == spec.num_people).then(|| render_rgb(spec)),
            };
            previous = target;
            sample
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_scene, WorldConfig};

    #[test]
    fn single_person_has_one_final_stage() {
        let s = gen_scene(1, &WorldConfig::default()).unwrap();
        let st = decompose_stages(&s);
        assert_eq!(st.len(), 1);
        assert!(st[0].context_pose.data().iter().all(|&v| v == -1.0));
        assert!(st[0].target_image.is_some());
    }

    #[test]
    fn context_chains_and_grows() {
        let s = gen_scene(2, &WorldConfig::default().with_people(3)).unwrap();
        let st = decompose_stages(&s);
        assert_eq!(st.len(), 3);
        assert_eq!(st[1].context_pose, st[0].target_pose);
        assert_eq!(st[2].context_pose, st[1].target_pose);
        let counts: Vec<usize> = st.iter().map(|x| x.target_pose.stroke_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert!(st[0].target_image.is_none() && st[1].target_image.is_none());
        assert!(st[2].target_image.is_some());
        assert_eq!(st[2].prompt.text_tokens.len(), 3 * 6);
    }
}

//! Runs the code blocks of the user guide as doc-tests so the book and the
//! library cannot drift apart.

#[cfg(doctest)]
mod guide {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(transforms, "../../../book/src/transforms.md");
    chapter!(frames, "../../../book/src/frames.md");
    chapter!(volume, "../../../book/src/volume.md");
    chapter!(fusion, "../../../book/src/fusion.md");
    chapter!(rendering, "../../../book/src/rendering.md");
    chapter!(tracking, "../../../book/src/tracking.md");
    chapter!(scale, "../../../book/src/scale.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}

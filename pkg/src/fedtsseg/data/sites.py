"""Per-site subject collections and sliding-window extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..model import GatedVolumeSequence
from .phantom import PhantomParams, SiteShift, apply_site_shift, generate_phantom, jittered


@dataclass
class Subject:
    subject_id: str
    seq: GatedVolumeSequence


@dataclass
class TrainingWindow:
    subject_id: str
    start_gate: int
    seq: GatedVolumeSequence  # window of cfg.gates frames; masks present iff labeled

    def target_mask(self, structure: str) -> np.ndarray:
        """Ground truth for the window: the first gate's mask."""
        return self.seq.mask_for(structure)[..., 0]


@dataclass
class SiteDataset:
    """All subjects of one acquisition site.

    Unlabeled sites (the adaptation target) never expose masks through the
    training-window path; evaluation uses eval_windows explicitly.
    """

    site_id: str
    subjects: list[Subject] = field(default_factory=list)
    labeled: bool = True

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate subject ids in site {self.site_id}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def as_unlabeled(self) -> "SiteDataset":
        return SiteDataset(site_id=self.site_id, subjects=self.subjects, labeled=False)

    def training_windows(self, window_gates: int) -> list[TrainingWindow]:
        """One window per (subject, start gate), cyclic over the cardiac cycle."""
        windows = []
        for subj in self.subjects:
            for start in range(subj.seq.gates):
                win = subj.seq.window(start, window_gates)
                if not self.labeled:
                    win = win.without_masks()
                windows.append(TrainingWindow(subj.subject_id, start, win))
        return windows

    def eval_windows(self, window_gates: int) -> list[TrainingWindow]:
        """Windows with masks regardless of the labeled flag (evaluation only)."""
        windows = []
        for subj in self.subjects:
            for start in range(subj.seq.gates):
                windows.append(TrainingWindow(subj.subject_id, start, subj.seq.window(start, window_gates)))
        return windows


def build_sites(
    n_subjects: Sequence[int],
    shifts: Sequence[SiteShift],
    params: PhantomParams,
    seed: int = 0,
    jitter: float = 0.06,
) -> list[SiteDataset]:
    """Deterministic multi-site cohort with per-site domain shift.

    Subject anatomy jitters around the base phantom; each site then applies
    its own intensity shift, so sites differ in distribution and not only
    in sample count.
    """
    if len(n_subjects) != len(shifts):
        raise ValueError("need one shift per site")
    if any(n < 1 for n in n_subjects):
        raise ValueError("every site needs at least one subject")
    sites = []
    for s, (count, shift) in enumerate(zip(n_subjects, shifts)):
        subjects = []
        for i in range(count):
            ss = np.random.SeedSequence([seed, s, i])
            child = np.random.default_rng(ss)
            p = jittered(params, child, jitter)
            gen_seed, shift_seed = (int(v) for v in ss.generate_state(2))
            seq = generate_phantom(p, seed=gen_seed)
            seq = apply_site_shift(seq, shift, seed=shift_seed)
            subjects.append(Subject(subject_id=f"site-{s}-subj-{i}", seq=seq))
        sites.append(SiteDataset(site_id=f"site-{s}", subjects=subjects))
    return sites

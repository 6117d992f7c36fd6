import torch

from tlpatch.detector import DetectorAdapter


class ReplayAdapter(DetectorAdapter):
    """Returns pre-built detections, looked up by the identity of the image tensor."""

    class_map = {0: "red", 1: "green", 2: "yellow"}

    def __init__(self, table: dict[int, list]):
        self.table = table

    @classmethod
    def for_samples(cls, samples, detections):
        return cls({s.image.data_ptr(): list(d) for s, d in zip(samples, detections)})

    def detect(self, image):
        return list(self.table.get(image.data_ptr(), []))

    def attack_losses(self, image, targets):
        z = torch.zeros((), dtype=image.dtype)
        return z, z


class GroundTruthAdapter(ReplayAdapter):
    """A perfect detector for a fixed set of clean images."""

    @classmethod
    def of(cls, samples):
        from tlpatch.core import Detection
        return cls.for_samples(samples, [[Detection(b, 1.0, c) for b, c in s.gt_boxes] for s in samples])

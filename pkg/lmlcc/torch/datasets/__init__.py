from .PatchDataset import PatchDataset

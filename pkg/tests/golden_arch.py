"""Architecture tables transcribed once as golden data.

Each row: (index, kind, contexts, skip_inputs, size, inner_size).
Contexts are written as in the tables; an empty tuple means the cell is blank.
Output layers carry size None (number of classes is set at training time).
"""

ETDNN = [
    (1, "tdnn", ("t-2:t+2",), (), 512, None),
    (2, "dense", ("t",), (), 512, None),
    (3, "tdnn", ("t-2,t,t+2",), (), 512, None),
    (4, "dense", ("t",), (), 512, None),
    (5, "tdnn", ("t-3:t+3",), (), 512, None),
    (6, "dense", ("t",), (), 512, None),
    (7, "tdnn", ("t-4,t,t+4",), (), 512, None),
    (8, "dense", ("t",), (), 512, None),
    (9, "dense", ("t",), (), 512, None),
    (10, "dense", ("t",), (), 1500, None),
    (11, "pooling", (), (), 2 * 1500, None),
    (12, "embedding_tap", (), (), 512, None),
    (13, "dense", (), (), 512, None),
    (14, "output_softmax", (), (), None, None),
]

_F = "ftdnn"
FTDNN = [
    (1, "tdnn", ("t-2:t+2",), (), 512, None),
    (2, _F, ("t-2,t", "t,t+2"), (), 1024, 256),
    (3, _F, ("t", "t"), (), 1024, 256),
    (4, _F, ("t-3,t", "t,t+3"), (), 1024, 256),
    (5, _F, ("t", "t"), (3,), 1024, 256),
    (6, _F, ("t-3,t", "t,t+3"), (), 1024, 256),
    (7, _F, ("t-3,t", "t,t+3"), (2, 4), 1024, 256),
    (8, _F, ("t-3,t", "t,t+3"), (), 1024, 256),
    (9, _F, ("t-3,t", "t,t+3"), (4, 6, 8), 1024, 256),
    (10, "dense", ("t", "t"), (), 2048, None),
    (11, "pooling", (), (), 4096, None),
    (12, "embedding_tap", (), (), 1024, None),
    (13, "dense", (), (), 1024, None),
    (14, "output_softmax", (), (), None, None),
]

_W = ("t-5,t-2", "t-2,t+1", "t+1,t+4")
_I = ("t", "t", "t")
EFTDNN = [
    (1, "tdnn", ("t-2:t+2",), (), 512, None),
    (2, "dense", (), (), 512, None),
    (3, _F, ("t-3,t-1", "t-1,t+1", "t+1,t+3"), (), 1024, 256),
    (4, "dense", (), (), 1024, None),
    (5, _F, _I, (), 1024, 256),
    (6, "dense", (), (), 1024, None),
    (7, _F, _W, (), 1024, 256),
    (8, "dense", (), (), 1024, None),
    (9, _F, _I, (5,), 1024, 256),
    (10, "dense", (), (), 1024, None),
    (11, _F, _W, (), 1024, 256),
    (12, "dense", (), (), 1024, None),
    (13, _F, _W, (3, 7), 1024, 256),
    (14, "dense", (), (), 1024, None),
    (15, _F, _W, (), 1024, 256),
    (16, "dense", (), (), 1024, None),
    (17, _F, _I, (7, 11, 15), 1024, 256),
    (18, "dense", ("t",), (), 2048, None),
    (19, "dense", ("t",), (), 2048, None),
    (20, "dense", ("t",), (), 2048, None),
    (21, "pooling", (), (), 4096, None),
    (22, "embedding_tap", (), (), 1024, None),
    (23, "dense", (), (), 1024, None),
    (24, "output_softmax", (), (), None, None),
]

RESNET = [
    (1, "resnet_block_stack", (), (), 512, None),
    (2, "dense", ("t",), (), 512, None),
    (3, "dense", ("t",), (), 1000, None),
    (4, "pooling", (), (), 2000, None),
    (5, "embedding_tap", (), (), 512, None),
    (6, "dense", (), (), 512, None),
    (7, "output_softmax", (), (), None, None),
]

# multitask x-vector branch: ten frame layers, pooling, two 512 segment layers, softmax
_XV_SLICES = ["t-2:t+2", "t", "t-2,t,t+2", "t", "t-3,t,t+3", "t", "t-4,t,t+4", "t", "t", "t"]
_XV_KIND = lambda s: "dense" if s == "t" else "tdnn"  # noqa: E731
MULTITASK_XVECTOR = [
    (i + 1, _XV_KIND(s), (s,), (), 1500 if i == 9 else 512, None) for i, s in enumerate(_XV_SLICES)
] + [
    (11, "pooling", (), (), 3000, None),
    (12, "embedding_tap", (), (), 512, None),
    (13, "dense", (), (), 512, None),
    (14, "output_softmax", (), (), None, None),
]
_ASR_SLICES = ["t-2:t+2", "t-2,t,t+2", "t-3,t,t+3", "t", "t", "t", "t"]
MULTITASK_ASR = [
    (i + 1, _XV_KIND(s), (s,), (), 512, None) for i, s in enumerate(_ASR_SLICES)
] + [(8, "output_softmax", (), (), None, None)]
_BN_SLICES = ["t-2:t+2", "t-1:t+1", "t-1:t+1", "t-3,t,t+3", "t-6,t-3,t"]
CVECTOR_BOTTLENECK = [
    (i + 1, "tdnn", (s,), (), 128 if i == 4 else 650, None) for i, s in enumerate(_BN_SLICES)
]
CVECTOR_XVECTOR = [row if row[1] != "pooling" else (11, "pooling", (), (), 2 * (1500 + 128), None)
                   for row in MULTITASK_XVECTOR]

GOLDEN = {
    "etdnn": {"xvector": ETDNN},
    "ftdnn": {"xvector": FTDNN},
    "eftdnn": {"xvector": EFTDNN},
    "resnet": {"xvector": RESNET},
    "multitask": {"xvector": MULTITASK_XVECTOR, "asr": MULTITASK_ASR},
    "cvector": {"xvector": CVECTOR_XVECTOR, "asr": MULTITASK_ASR, "bottleneck": CVECTOR_BOTTLENECK},
}

# (tap layer, pooled dim, embedding dim)
TAPS = {
    "etdnn": (12, 3000, 512),
    "ftdnn": (12, 4096, 1024),
    "eftdnn": (22, 4096, 1024),
    "resnet": (5, 2000, 512),
    "multitask": (12, 3000, 512),
    "cvector": (12, 3256, 512),
}

SHARED = {"multitask": (("xvector", "asr", 1),), "cvector": (("xvector", "asr", 1),)}
CONCAT_POOL = {"cvector": ("bottleneck", 5)}

# receptive fields summed by hand from the context columns
RECEPTIVE = {
    ("etdnn", "xvector"): (2 + 2 + 3 + 4, 2 + 2 + 3 + 4),
    ("ftdnn", "xvector"): (2 + 2 + 3 * 5, 2 + 2 + 3 * 5),
    ("multitask", "asr"): (2 + 2 + 3, 2 + 2 + 3),
    ("cvector", "bottleneck"): (2 + 1 + 1 + 3 + 6, 2 + 1 + 1 + 3 + 0),
}

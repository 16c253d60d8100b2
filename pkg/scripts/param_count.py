"""Print parameter counts of the network presets."""

from femseg.nn.vnet import PRESETS, VNetModel, count_parameters

for name, cfg in PRESETS.items():
    print(f"{name:>6}: {count_parameters(VNetModel(cfg)):>10,d} parameters  {cfg}")

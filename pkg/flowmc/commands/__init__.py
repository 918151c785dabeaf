from typing import Callable, Dict

from flowmc.commands import diagnose, guiding_bench, pss_bench, train_image

COMMANDS: Dict[str, Callable[..., int]] = {
    "train-image": train_image.run,
    "guiding-bench": guiding_bench.run,
    "diagnose-appendix-b": diagnose.run,
    "pss-bench": pss_bench.run,
}

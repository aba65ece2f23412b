"""The whole pipeline on a corpus small enough to finish in about a minute.

Self-supervised training never sees speaker labels: the trainer strips them
from the manifest. Labels come back only for fine-tuning, on half the data,
and the evaluation uses speakers neither stage has met.
"""

import json
import tempfile
from pathlib import Path

from cldino.corpus import generate_corpus, make_trials
from cldino.curriculum import epoch_subset
from cldino.encoder import Encoder, EncoderConfig
from cldino.evaluation import evaluate
from cldino.schedule import LrConfig
from cldino.training import FinetuneConfig, TrainConfig, finetune, train_ssl

root = Path(tempfile.mkdtemp())
train = generate_corpus(6, 8, (2.0, 2.5), seed=21, out_dir=root / "train")
held = generate_corpus(6, 6, (2.0, 2.5), seed=22, out_dir=root / "eval", prefix="ev")
trials = make_trials(held, 60, 60, seed=0)

small = EncoderConfig(channels=32, embedding_dim=32, attention_channels=32)
print("untrained EER", evaluate(Encoder(small, seed=0), held, trials)["eer"])

# a 4-epoch block so that CL_D3 steps through 0.2, 0.4, ... every 4 epochs
cfg = TrainConfig.desk(epochs=8, batch_size=16, data_course="CL_D3", aug_course="CL_A2",
                       lr=LrConfig(restart_period=4))
trainer = train_ssl(train, cfg, small, root / "ssl")
for rec in trainer.history:
    print(f"epoch {rec.epoch}: loss {rec.loss:7.3f}  data {rec.data_fraction:.1f}  "
          f"aug {rec.aug_fraction:.1f}  probe {rec.center_max_prob * 256:.1f}/K")
first = json.loads((root / "ssl/audit.jsonl").read_text().splitlines()[0])
print(f"first batch: {len(first['utt_ids'])} utterances, {first['n_aug']} augmented")
print("SSL EER", evaluate(trainer.encoder, held, trials)["eer"])

labelled = train.subset(epoch_subset(train, 0.5, "fixed_speakers", seed=0))
ft = finetune(root / "ssl/last.ckpt", labelled,
              FinetuneConfig(epochs=6, batch_size=8,
                             lr=LrConfig(mode="single_cosine", total_epochs=6)))
print(f"fine-tuned on {len(labelled)} labelled utterances, train accuracy "
      f"{ft.history[-1]['accuracy']:.2f}, EER {evaluate(ft.encoder, held, trials)['eer']}")

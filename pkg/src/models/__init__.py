"""Frame encoder, contrastive pretraining and clustering heads."""

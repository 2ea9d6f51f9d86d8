"""Small model geometries shared by the slower integration tests."""

from prosody_transfer.reference_encoder import EncoderConfig
from prosody_transfer.synthesis import GeneratorConfig


def tiny_gen_config(corpus, clf):
    return GeneratorConfig(n_mels=corpus.mel_config.n_mels, num_phonemes=corpus.num_phonemes,
                           speaker_dim=clf.bottleneck, phoneme_embedding=16, phoneme_conv=(16, 16),
                           phoneme_gru=16, decoder_conv=(32, 32), decoder_gru=32, kernel_size=3,
                           encoder=EncoderConfig(latent_dim=8, tau=4, conv_channels=(16, 16), kernel_size=3))

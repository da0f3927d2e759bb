from django.conf import settings
from rest_framework import serializers

from .config import (
    BITAB_PRESETS, DATASET_PRESETS, ENCODER_PRESETS, HEAD_BINARY, HEAD_SCD,
    AugmentConfig, BiTabSpec, BridgingConfig, DataConfig, EncoderConfig,
    InferenceConfig, OptimConfig, PhotometricConfig, RunConfig, ScheduleConfig,
    TapSet, ViTConfig,
)
from .exceptions import ConfigurationError


class PairField(serializers.ListField):
    """Two-element numeric range such as ``[0.5, 1.5]``"""

    def __init__(self, **kwargs):
        kwargs.setdefault('child', serializers.FloatField())
        kwargs.setdefault('min_length', 2)
        kwargs.setdefault('max_length', 2)
        super().__init__(**kwargs)


class EncoderSerializer(serializers.Serializer):
    preset = serializers.ChoiceField(choices=list(ENCODER_PRESETS), required=False, allow_blank=True, default='')
    patch_size = serializers.IntegerField(min_value=1, required=False)
    embed_dim = serializers.IntegerField(min_value=1, required=False)
    depth = serializers.IntegerField(min_value=1, required=False)
    num_heads = serializers.IntegerField(min_value=1, required=False)
    ffn_ratio = serializers.FloatField(min_value=0.0, required=False)
    pretrain_resolution = serializers.IntegerField(min_value=1, required=False)
    use_class_token = serializers.BooleanField(required=False)
    pre_norm = serializers.BooleanField(required=False)
    activation = serializers.ChoiceField(choices=['gelu', 'quick_gelu'], required=False)
    checkpoint = serializers.CharField(required=False, allow_blank=True, default='')
    init_seed = serializers.IntegerField(required=False, default=0)

    shape_fields = ('patch_size', 'embed_dim', 'depth', 'num_heads', 'ffn_ratio',
                    'pretrain_resolution', 'use_class_token', 'pre_norm', 'activation')

    def validate(self, attrs):
        shape = dict(ENCODER_PRESETS.get(attrs.get('preset') or '', {}))
        shape.update({k: attrs[k] for k in self.shape_fields if k in attrs})
        missing = [k for k in ('patch_size', 'embed_dim', 'depth', 'num_heads', 'pretrain_resolution')
                   if k not in shape]
        if missing:
            raise serializers.ValidationError(f"missing encoder fields (or a preset): {', '.join(missing)}")
        try:
            attrs['vit'] = ViTConfig(**shape)
        except ConfigurationError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class TapsSerializer(serializers.Serializer):
    indices = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False, allow_null=True,
                                    default=None)


class BiTabSerializer(serializers.Serializer):
    preset = serializers.ChoiceField(choices=list(BITAB_PRESETS), required=False, default='stacked-blocks')
    stage_channels = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False,
                                           min_length=1)
    stage_strides = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False,
                                          min_length=1)
    head_channels = serializers.IntegerField(min_value=1, required=False)
    head_kind = serializers.ChoiceField(choices=[HEAD_BINARY, HEAD_SCD], required=False, default=HEAD_BINARY)
    num_semantic_classes = serializers.IntegerField(min_value=0, required=False, default=0)

    def validate(self, attrs):
        shape = dict(BITAB_PRESETS[attrs['preset']])
        for key in ('stage_channels', 'stage_strides', 'head_channels'):
            if key in attrs:
                shape[key] = attrs[key]
        try:
            attrs['spec'] = BiTabSpec(
                head_kind=attrs['head_kind'],
                num_semantic_classes=attrs['num_semantic_classes'],
                **shape,
            )
        except ConfigurationError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class BridgingSerializer(serializers.Serializer):
    enabled = serializers.BooleanField(required=False, default=True)
    affinity = serializers.ChoiceField(choices=['dot', 'cosine'], required=False, default='dot')
    zero_init = serializers.BooleanField(required=False, default=False)
    init_range = serializers.FloatField(min_value=0.0, required=False, default=0.02)


class PhotometricSerializer(serializers.Serializer):
    prob = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=0.5)
    brightness_delta = serializers.FloatField(min_value=0.0, required=False, default=32.0)
    contrast_range = PairField(required=False, default=[0.5, 1.5])
    saturation_range = PairField(required=False, default=[0.5, 1.5])
    hue_delta = serializers.FloatField(min_value=0.0, max_value=180.0, required=False, default=18.0)

    def validate(self, attrs):
        for key in ('contrast_range', 'saturation_range'):
            low, high = attrs[key]
            if low < 0 or high < low:
                raise serializers.ValidationError({key: f'expected 0 <= low <= high, got {[low, high]}'})
        return attrs


class AugmentSerializer(serializers.Serializer):
    enabled = serializers.BooleanField(required=False, default=True)
    crop_size = serializers.IntegerField(min_value=1, required=False)
    flip_prob = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=0.5)
    photometric = PhotometricSerializer(required=False)
    seed = serializers.IntegerField(required=False)


class DataSerializer(serializers.Serializer):
    root = serializers.CharField(required=False, allow_blank=True, default='')
    preset = serializers.ChoiceField(choices=list(DATASET_PRESETS), required=False, allow_blank=True, default='')
    layout = serializers.ChoiceField(choices=['split_folders', 'manifest', 's2looking', 'synthetic'], required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False, default=8)
    num_workers = serializers.IntegerField(min_value=0, required=False)
    crop_size = serializers.IntegerField(min_value=1, required=False)
    augment = AugmentSerializer(required=False)
    label_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=1.0)
    mean = serializers.ListField(child=serializers.FloatField(), required=False, min_length=1)
    std = serializers.ListField(child=serializers.FloatField(min_value=1e-12), required=False, min_length=1)
    ignore_index = serializers.IntegerField(required=False, default=255)
    label_divisor = serializers.IntegerField(min_value=1, required=False)
    synthetic_samples = serializers.IntegerField(min_value=1, required=False, default=8)
    synthetic_size = serializers.IntegerField(min_value=8, required=False, default=64)
    train_split = serializers.CharField(required=False, default='train')
    val_split = serializers.CharField(required=False, default='val')
    test_split = serializers.CharField(required=False, default='test')

    def validate_label_fraction(self, value):
        if value <= 0:
            raise serializers.ValidationError('label_fraction must be in (0, 1]')
        return value


class OptimSerializer(serializers.Serializer):
    base_lr = serializers.FloatField(min_value=0.0, required=False, default=1e-4)
    head_lr_mult = serializers.FloatField(min_value=1.0, required=False, default=10.0)
    betas = PairField(required=False, default=[0.9, 0.999])
    eps = serializers.FloatField(min_value=0.0, required=False, default=1e-8)
    weight_decay = serializers.FloatField(min_value=0.0, required=False, default=0.01)

    def validate_base_lr(self, value):
        if value <= 0:
            raise serializers.ValidationError('base_lr must be positive')
        return value


class ScheduleSerializer(serializers.Serializer):
    max_iters = serializers.IntegerField(min_value=1, required=False, default=40000)
    power = serializers.FloatField(min_value=0.0, required=False, default=1.0)
    min_lr = serializers.FloatField(min_value=0.0, required=False, default=0.0)
    eval_interval = serializers.IntegerField(min_value=1, required=False, default=4000)
    log_interval = serializers.IntegerField(min_value=1, required=False, default=50)


class ArisSerializer(serializers.Serializer):
    # 0 means 'use the encoder's pretrain resolution'
    target = serializers.IntegerField(min_value=0, required=False, default=0)


class InferenceSerializer(serializers.Serializer):
    window = serializers.IntegerField(min_value=1, required=False)
    stride = serializers.IntegerField(min_value=1, required=False)
    fps_warmup = serializers.IntegerField(min_value=0, required=False, default=lambda: settings.BAN_FPS_WARMUP)


class RunConfigSerializer(serializers.Serializer):
    """Validates a whole run-config mapping and builds a :class:`RunConfig`."""
    name = serializers.CharField()
    seed = serializers.IntegerField(required=False, default=lambda: settings.BAN_DEFAULT_SEED)
    work_dir = serializers.CharField(required=False, allow_blank=True, default='')
    encoder = EncoderSerializer()
    taps = TapsSerializer(required=False)
    bitab = BiTabSerializer(required=False)
    bridging = BridgingSerializer(required=False)
    data = DataSerializer(required=False)
    optim = OptimSerializer(required=False)
    schedule = ScheduleSerializer(required=False)
    aris = ArisSerializer(required=False)
    inference = InferenceSerializer(required=False)

    def validate(self, attrs):
        errors = {}
        vit = attrs['encoder']['vit']
        bitab = self._section(attrs, 'bitab', BiTabSerializer)['spec']
        bridging = self._section(attrs, 'bridging', BridgingSerializer)
        indices = self._section(attrs, 'taps', TapsSerializer).get('indices')
        if bridging['enabled']:
            if indices is None:
                if bitab.num_stages > vit.depth:
                    errors['taps'] = (f'cannot spread {bitab.num_stages} taps over {vit.depth} encoder blocks; '
                                      f'list them explicitly')
            elif len(indices) != bitab.num_stages:
                errors['taps'] = f'{len(indices)} taps given for {bitab.num_stages} Bi-TAB stages'
            elif indices[-1] > vit.depth:
                errors['taps'] = f'tap index {indices[-1]} exceeds encoder depth {vit.depth}'
            elif any(b <= a for a, b in zip(indices, indices[1:])):
                errors['taps'] = f'tap indices must be strictly increasing, got {indices}'

        for key, serializer_class in (('optim', OptimSerializer), ('schedule', ScheduleSerializer),
                                      ('aris', ArisSerializer)):
            self._section(attrs, key, serializer_class)
        data = self._section(attrs, 'data', DataSerializer)
        crop = self._crop_size(data)
        inference = self._section(attrs, 'inference', InferenceSerializer)
        window = inference.get('window') or crop
        stride = inference.get('stride') or max(window // 2, 1)
        if stride > window:
            errors['inference'] = f'stride {stride} exceeds window {window}'
        if crop % bitab.total_stride:
            errors['data'] = f'crop_size {crop} is not divisible by the Bi-TAB total stride {bitab.total_stride}'
        if errors:
            raise serializers.ValidationError(errors)
        return attrs

    @staticmethod
    def _section(attrs, key, serializer_class):
        if key not in attrs:
            serializer = serializer_class(data={})
            serializer.is_valid(raise_exception=True)
            attrs[key] = serializer.validated_data
        return attrs[key]

    @staticmethod
    def _crop_size(data):
        preset = DATASET_PRESETS.get(data.get('preset') or '', {})
        augment = data.get('augment') or {}
        if data.get('layout') == 'synthetic':
            preset = {'crop_size': data.get('synthetic_size') or 64}
        return augment.get('crop_size') or data.get('crop_size') or preset.get('crop_size') or 512

    def build(self):
        """Validate and convert to dataclasses; raises ConfigurationError listing every problem."""
        if not self.is_valid():
            raise ConfigurationError(f'invalid run-config: {_flatten_errors(self.errors)}')
        attrs = self.validated_data
        vit = attrs['encoder']['vit']
        bitab = attrs['bitab']['spec']
        bridging = BridgingConfig(**{k: attrs['bridging'][k] for k in ('enabled', 'affinity', 'zero_init',
                                                                        'init_range')})
        indices = attrs['taps'].get('indices')
        if not bridging.enabled:
            taps = TapSet(())
        elif indices is None:
            taps = TapSet.evenly_spaced(vit.depth, bitab.num_stages)
        else:
            taps = TapSet(tuple(indices))

        data = attrs['data']
        preset = DATASET_PRESETS.get(data.get('preset') or '', {})
        augment = data.get('augment') or {}
        photometric = augment.get('photometric') or {}
        crop = self._crop_size(data)
        augment_cfg = AugmentConfig(
            crop_size=crop,
            flip_prob=augment.get('flip_prob', 0.5),
            photometric=PhotometricConfig(
                prob=photometric.get('prob', 0.5),
                brightness_delta=photometric.get('brightness_delta', 32.0),
                contrast_range=tuple(photometric.get('contrast_range', (0.5, 1.5))),
                saturation_range=tuple(photometric.get('saturation_range', (0.5, 1.5))),
                hue_delta=photometric.get('hue_delta', 18.0),
            ),
            seed=augment.get('seed', attrs['seed']),
            enabled=augment.get('enabled', True),
        )
        defaults = DataConfig()
        data_cfg = DataConfig(
            root=data['root'],
            layout=data.get('layout') or preset.get('layout', 'split_folders'),
            preset=data.get('preset') or '',
            batch_size=data['batch_size'],
            num_workers=data.get('num_workers', 0),
            augment=augment_cfg,
            label_fraction=data['label_fraction'],
            mean=tuple(data.get('mean') or defaults.mean),
            std=tuple(data.get('std') or defaults.std),
            ignore_index=data['ignore_index'],
            label_divisor=data.get('label_divisor') or preset.get('label_divisor', 1),
            synthetic_samples=data['synthetic_samples'],
            synthetic_size=data['synthetic_size'],
            train_split=data['train_split'],
            val_split=data['val_split'],
            test_split=data['test_split'],
        )
        inference = attrs['inference']
        window = inference.get('window') or crop
        return RunConfig(
            name=attrs['name'],
            seed=attrs['seed'],
            work_dir=attrs['work_dir'],
            encoder=EncoderConfig(vit=vit, checkpoint=attrs['encoder']['checkpoint'],
                                  preset=attrs['encoder']['preset'], init_seed=attrs['encoder']['init_seed']),
            taps=taps,
            bitab=bitab,
            bridging=bridging,
            data=data_cfg,
            optim=OptimConfig(base_lr=attrs['optim']['base_lr'], head_lr_mult=attrs['optim']['head_lr_mult'],
                              betas=tuple(attrs['optim']['betas']), eps=attrs['optim']['eps'],
                              weight_decay=attrs['optim']['weight_decay']),
            schedule=ScheduleConfig(**attrs['schedule']),
            inference=InferenceConfig(window=window, stride=inference.get('stride') or max(window // 2, 1),
                                      fps_warmup=inference['fps_warmup']),
            aris_target=attrs['aris']['target'],
        )


def _flatten_errors(errors, prefix=''):
    return '; '.join(_error_lines(errors, prefix))


def _error_lines(errors, prefix):
    if isinstance(errors, dict):
        lines = []
        for key, value in errors.items():
            label = prefix if key == 'non_field_errors' else f'{prefix}.{key}'.strip('.')
            lines.extend(_error_lines(value, label))
        return lines
    if isinstance(errors, list):
        return [line for item in errors for line in _error_lines(item, prefix)]
    return [f'{prefix}: {errors}' if prefix else str(errors)]

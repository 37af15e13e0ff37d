/**
 * Annotation form for the current lasso selection: choose a label type
 * and a binary value, apply to every selected point. The panel is pure
 * presentation; the app owns the optimistic update and rollback around
 * the actual POST and reports the outcome back here.
 */

import { Emitter } from "./emitter.js";

export interface AnnotateEvents {
	/** Fired when the user applies a label to the current selection. */
	apply: { labelType: string; value: number };
	/** Fired when the annotation label type changes. */
	labelType: { labelType: string };
}

function el<K extends keyof HTMLElementTagNameMap>(
	tag: K,
	className = "",
	text = "",
): HTMLElementTagNameMap[K] {
	const node = document.createElement(tag);
	if (className) node.className = className;
	if (text) node.textContent = text;
	return node;
}

export class AnnotatePanel {
	#root: HTMLElement;
	#emitter = new Emitter<AnnotateEvents>();
	#count = 0;

	#countLabel: HTMLElement;
	#typeSelect: HTMLSelectElement;
	#valueSelect: HTMLSelectElement;
	#applyButton: HTMLButtonElement;
	#status: HTMLElement;
	#errors: HTMLElement;

	constructor(container: HTMLElement, labelTypes: string[]) {
		this.#root = el("div", "annotate-panel");
		container.appendChild(this.#root);

		this.#countLabel = el("div", "selection-count", "0 points selected");

		this.#typeSelect = el("select", "label-type-select");
		for (const name of labelTypes) {
			const option = el("option", "", name);
			option.value = name;
			this.#typeSelect.appendChild(option);
		}
		this.#typeSelect.addEventListener("change", () => {
			this.#emitter.emit("labelType", { labelType: this.labelType });
		});

		this.#valueSelect = el("select", "label-value-select");
		for (const value of [0, 1]) {
			const option = el("option", "", String(value));
			option.value = String(value);
			this.#valueSelect.appendChild(option);
		}

		this.#applyButton = el("button", "apply-button", "annotate selection");
		this.#applyButton.disabled = true;
		this.#applyButton.addEventListener("click", () => {
			if (this.#count === 0) return;
			this.#emitter.emit("apply", {
				labelType: this.labelType,
				value: Number(this.#valueSelect.value),
			});
		});

		this.#status = el("div", "annotate-status");
		this.#errors = el("ul", "annotate-errors");

		const controls = el("div", "annotate-controls");
		controls.append(this.#typeSelect, this.#valueSelect, this.#applyButton);
		this.#root.append(this.#countLabel, controls, this.#status, this.#errors);
	}

	on<K extends keyof AnnotateEvents & string>(
		event: K,
		fn: (data: AnnotateEvents[K]) => void,
	): () => void {
		return this.#emitter.on(event, fn);
	}

	get labelType(): string {
		return this.#typeSelect.value;
	}

	get applyEnabled(): boolean {
		return !this.#applyButton.disabled;
	}

	/** Update the selection counter; zero disables the apply action. */
	setSelectionCount(count: number): void {
		this.#count = count;
		this.#countLabel.textContent = `${count} point${count === 1 ? "" : "s"} selected`;
		this.#applyButton.disabled = count === 0;
	}

	showStatus(text: string): void {
		this.#status.textContent = text;
		this.#errors.replaceChildren();
	}

	/** Surface per-field server errors for a rejected annotation post. */
	showErrors(lines: string[]): void {
		this.#status.textContent = "annotation rejected:";
		this.#errors.replaceChildren();
		for (const line of lines) {
			this.#errors.appendChild(el("li", "", line));
		}
	}

	get errorLines(): string[] {
		return Array.from(this.#errors.children).map((li) => li.textContent ?? "");
	}

	destroy(): void {
		this.#emitter.clear();
		this.#root.remove();
	}
}
